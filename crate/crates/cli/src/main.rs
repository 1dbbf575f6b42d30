fn main() {
    std::process::exit(duometa_cli::run(std::env::args_os()));
}
