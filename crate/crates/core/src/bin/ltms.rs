fn main() {
    std::process::exit(ltms_core::cli::run(std::env::args_os()));
}
