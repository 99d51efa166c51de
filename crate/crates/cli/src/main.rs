fn main() {
    std::process::exit(cpaudit::cli::run(std::env::args_os()));
}
