pub mod isa;
pub mod machine;
pub mod vmx;
pub mod memguard;
pub mod osdep;
pub mod framework;
pub mod guestos;
pub mod hyperdbg;
