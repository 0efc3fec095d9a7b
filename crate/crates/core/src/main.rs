fn main() {
    std::process::exit(fedcmi_core::cli::run(std::env::args_os()));
}
