fn main() {
    std::process::exit(gift_ct::cli::run(std::env::args_os()));
}
