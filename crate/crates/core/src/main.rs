fn main() {
    let code = blind_plda::cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
