fn main() {
    std::process::exit(sweepfuse_cli::run(std::env::args_os()));
}
