fn main() {
    std::process::exit(montage::cli::run(std::env::args_os()));
}
