fn main() {
    std::process::exit(vdc::cli::run(std::env::args_os()));
}
