fn main() {
    std::process::exit(subgroup_transport::cli::run(std::env::args_os()));
}
