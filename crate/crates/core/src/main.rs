fn main() { std::process::exit(sausagelab::cli::cli_main()); }
