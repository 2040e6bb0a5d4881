fn main() {
    std::process::exit(fewseg_cli::run(std::env::args_os()));
}
