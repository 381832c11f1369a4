fn main() {
    println!("flowlm");
}
