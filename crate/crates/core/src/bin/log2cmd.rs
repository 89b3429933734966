fn main() {
    std::process::exit(log2cmd::cli_pipeline::run(std::env::args_os()));
}
