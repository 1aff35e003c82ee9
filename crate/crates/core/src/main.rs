fn main() {
    std::process::exit(gastrace::cli::run(std::env::args_os()));
}
