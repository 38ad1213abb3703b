fn main() {
    std::process::exit(gjn::cli::run(std::env::args_os()));
}
