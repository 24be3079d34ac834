fn main() {
    std::process::exit(gape_lab::cli::run(std::env::args_os()));
}
