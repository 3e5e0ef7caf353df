fn main() {
    std::process::exit(vitvs::cli::run(std::env::args_os()));
}
