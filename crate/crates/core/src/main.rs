fn main() {
    if let Err(e) = bsde_stopping::cli::run(std::env::args_os()) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code());
    }
}
