fn main() {
    std::process::exit(srmil::cli::run(std::env::args_os()));
}
