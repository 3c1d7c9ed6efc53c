fn main() {
    std::process::exit(kpinr::run(std::env::args_os()));
}
