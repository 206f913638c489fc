fn main() {
    std::process::exit(unicon::cli::run(std::env::args_os()));
}
