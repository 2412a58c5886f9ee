fn main() {
    std::process::exit(spotlight_cli::run(std::env::args_os()));
}
