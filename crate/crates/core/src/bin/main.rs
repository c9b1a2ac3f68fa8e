fn main() {
    std::process::exit(attn_nmt::cli::cli_main(std::env::args_os()));
}
