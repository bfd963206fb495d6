fn main() {
    std::process::exit(hsi_fsl::cli::run(std::env::args_os()));
}
