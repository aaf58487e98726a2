fn main() {
    std::process::exit(dpose::cli::run(std::env::args_os()));
}
