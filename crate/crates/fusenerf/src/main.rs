fn main() {
    env_logger::init();
    eprintln!("{{\"error\": \"cli not wired yet\"}}");
    std::process::exit(1);
}
