fn main() {
    std::process::exit(acros_cli::run(std::env::args_os()));
}
