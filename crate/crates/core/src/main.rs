fn main() {
    std::process::exit(corr_ceiling::cli::run(std::env::args_os()));
}
