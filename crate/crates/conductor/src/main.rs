#[tokio::main]
async fn main() {
    std::process::exit(conductor::cli::main_entry().await);
}
