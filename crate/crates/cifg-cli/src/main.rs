fn main() {
    println!("cifg");
}
