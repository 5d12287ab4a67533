fn main() {
    std::process::exit(subspace_doa::cli::run_cli(std::env::args_os()));
}
