fn main() {
    std::process::exit(dpmtl::cli::run(std::env::args_os()));
}
