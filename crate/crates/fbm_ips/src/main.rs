fn main() {
    std::process::exit(fbm_ips::cli::run(std::env::args_os()));
}
