fn main() {
    std::process::exit(margin_fsl::cli::run(std::env::args_os()));
}
