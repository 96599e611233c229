fn main() {
    std::process::exit(gradshield::harness::cli::cli_main(std::env::args_os()));
}
