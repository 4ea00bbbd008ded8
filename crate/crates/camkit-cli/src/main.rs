fn main() {
    std::process::exit(camkit_cli::run(std::env::args_os()));
}
