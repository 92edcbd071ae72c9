fn main() {
    std::process::exit(mobiletl::cli::run(std::env::args_os()));
}
