fn main() {
    std::process::exit(flowdistill::cli::run(std::env::args_os()));
}
