fn main() {
    std::process::exit(blg_cli::run(std::env::args_os()));
}
