fn main() {
    std::process::exit(spair::cli::run(std::env::args_os()));
}
