fn main() {
    let code = mcbn::cli::cli_main(std::env::args().collect());
    std::process::exit(code);
}
