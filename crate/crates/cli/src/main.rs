fn main() {
    std::process::exit(extremeseg_cli::run(std::env::args_os()));
}
