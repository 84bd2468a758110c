fn main() {
    println!("blocklab scaffold");
}
