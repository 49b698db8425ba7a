fn main() {
    std::process::exit(ortho_lora::cli::run_cli(std::env::args_os()));
}
