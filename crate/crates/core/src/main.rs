fn main() {
    std::process::exit(weylscope::cli::run(std::env::args_os()));
}
