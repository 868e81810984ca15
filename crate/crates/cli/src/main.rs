use hypoheat::oracle::thread_cap;

fn main() {
    if let Some(n) = thread_cap() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::process::exit(hypoheat_cli::main_with_args(std::env::args_os()));
}
