fn main() {
    std::process::exit(factorbird_cli::run(std::env::args_os()));
}
