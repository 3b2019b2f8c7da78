fn main() {
    std::process::exit(interpolant_lab::cli::run(std::env::args_os()));
}
