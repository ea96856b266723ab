fn main() {
    std::process::exit(medbrain_server::cli::run(std::env::args_os()));
}
