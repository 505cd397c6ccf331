fn main() {
    std::process::exit(sbmm::bench::cli_main(std::env::args_os()));
}
