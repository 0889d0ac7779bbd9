fn main() {
    std::process::exit(clast::cli::run(std::env::args_os()));
}
