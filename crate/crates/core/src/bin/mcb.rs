fn main() {
    std::process::exit(mcb_core::cli::run(std::env::args_os()));
}
