fn main() {
    std::process::exit(klda_cli::run(std::env::args_os()));
}
