fn main() {
    std::process::exit(losatok_cli::run(std::env::args_os()));
}
