fn main() {
    std::process::exit(tdil::cli::run(std::env::args_os()));
}
