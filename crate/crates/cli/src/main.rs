fn main() {
    std::process::exit(uags_cli::run(std::env::args_os()));
}
