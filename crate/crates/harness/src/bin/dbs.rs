fn main() {
    std::process::exit(dbs_harness::cli::run(std::env::args_os()));
}
