fn main() {
    std::process::exit(patchmosaic::cli::run(std::env::args_os()));
}
