fn main() {
    std::process::exit(mkv_fbsde::cli::run(std::env::args_os()));
}
