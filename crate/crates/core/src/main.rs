fn main() {
    std::process::exit(mgfuse::cli::run(std::env::args_os()));
}
