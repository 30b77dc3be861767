fn main() {
    std::process::exit(fracmix::cli::run(std::env::args_os()));
}
