fn main() {
    std::process::exit(diffwatch_cli::run(std::env::args_os()));
}
