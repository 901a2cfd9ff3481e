fn main() {
    std::process::exit(fairsight::cli::run(std::env::args_os()));
}
