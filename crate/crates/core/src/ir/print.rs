use std::fmt;

use super::{Op, Operand, Program, PTW_LABEL_PREFIX};

fn operand(p: &Program, o: &Operand) -> String {
    match o {
        Operand::Imm(v) if *v > 0 && p.global_containing(*v as u64).is_some() => format!("g{v}"),
        Operand::Imm(v) => v.to_string(),
        Operand::Reg(r) => r.to_string(),
        Operand::Mem { base, disp } if *disp == 0 => format!("[{base}]"),
        Operand::Mem { base, disp } if *disp < 0 => format!("[{base}-{}]", disp.unsigned_abs()),
        Operand::Mem { base, disp } => format!("[{base}+{disp}]"),
        Operand::Abs(a) => format!("[g{a}]"),
    }
}

fn op_text(p: &Program, op: &Op) -> String {
    let o = |x: &Operand| operand(p, x);
    match op {
        Op::Mov { dst, src } => format!("mov {}, {}", o(dst), o(src)),
        Op::Add { dst, src } => format!("add {dst}, {}", o(src)),
        Op::Sub { dst, src } => format!("sub {dst}, {}", o(src)),
        Op::Cmp { a, b } => format!("cmp {}, {}", o(a), o(b)),
        Op::Jmp { target } => format!("jmp {target}"),
        Op::Je { target } => format!("je {target}"),
        Op::Jne { target } => format!("jne {target}"),
        Op::Call { func } => format!("call {func}"),
        Op::Ret => "ret".into(),
        Op::Halt => "halt".into(),
        Op::Alloc { dst, site, size } => format!("alloc {dst}, @{site}, {size}"),
        Op::Lock { lock } => format!("lock {}", o(lock)),
        Op::Unlock { lock } => format!("unlock {}", o(lock)),
        Op::Spawn { func, dst } => format!("spawn {func}, {dst}"),
        Op::Join { handle } => format!("join {}", o(handle)),
        Op::Ptwrite { src: Some(r), id } => format!("ptwrite {r}, #{id}"),
        Op::Ptwrite { src: None, id } => format!("ptwrite #{id}"),
    }
}

pub(super) fn write_program(p: &Program, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    for g in &p.globals {
        writeln!(f, "global g{} size {}", g.addr, g.size)?;
    }
    for func in &p.functions {
        writeln!(f, "fn {} {{", func.name)?;
        for ins in &func.instrs {
            let text = op_text(p, &ins.op);
            if ins.label.starts_with(PTW_LABEL_PREFIX) {
                writeln!(f, "    {text}")?;
            } else {
                writeln!(f, "{}: {text}", ins.label)?;
            }
        }
        writeln!(f, "}}")?;
    }
    Ok(())
}
