fn main() {
    std::process::exit(jfb_control::cli::run(std::env::args_os()));
}
