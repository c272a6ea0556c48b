fn main() {
    std::process::exit(catsel::cli::run(std::env::args_os()));
}
