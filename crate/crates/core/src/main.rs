fn main() {
    std::process::exit(hybridview::cli::run(std::env::args_os()));
}
