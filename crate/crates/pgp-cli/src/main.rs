fn main() {
    std::process::exit(pgp_cli::run());
}
