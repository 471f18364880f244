fn main() {
    std::process::exit(fasc::cli::run(std::env::args_os()));
}
