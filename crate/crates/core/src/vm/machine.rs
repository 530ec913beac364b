use std::collections::BTreeMap;

use super::isa::{
    decode, DecodeError, Insn, Reg, MAX_INSN_LEN, SYS_EXIT, SYS_READ, SYS_RECV_WAIT, SYS_WRITE,
};
use super::{ExecutionResult, LoadLayout, Program, Termination, PAGE_SIZE};

type Page = Box<[u8; PAGE_SIZE as usize]>;

/// Sparse page-granular memory. Accesses to unmapped pages fault.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Memory {
    pages: BTreeMap<u64, Page>,
}

impl Memory {
    pub fn map_zeroed(&mut self, addr: u64, pages: u64) {
        let first = addr / PAGE_SIZE;
        for p in first..first + pages {
            self.pages
                .entry(p)
                .or_insert_with(|| Box::new([0; PAGE_SIZE as usize]));
        }
    }

    pub fn is_mapped(&self, addr: u64) -> bool {
        self.pages.contains_key(&(addr / PAGE_SIZE))
    }

    /// Copy `buf.len()` bytes starting at `addr`; on failure returns the
    /// first unmapped address.
    pub fn read(&self, addr: u64, buf: &mut [u8]) -> Result<(), u64> {
        let mut done = 0usize;
        while done < buf.len() {
            let a = addr.wrapping_add(done as u64);
            let page = self.pages.get(&(a / PAGE_SIZE)).ok_or(a)?;
            let off = (a % PAGE_SIZE) as usize;
            let n = (buf.len() - done).min(PAGE_SIZE as usize - off);
            buf[done..done + n].copy_from_slice(&page[off..off + n]);
            done += n;
        }
        Ok(())
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), u64> {
        self.check_range(addr, data.len() as u64)?;
        let mut done = 0usize;
        while done < data.len() {
            let a = addr.wrapping_add(done as u64);
            let page = self.pages.get_mut(&(a / PAGE_SIZE)).expect("range checked");
            let off = (a % PAGE_SIZE) as usize;
            let n = (data.len() - done).min(PAGE_SIZE as usize - off);
            page[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
        Ok(())
    }

    fn check_range(&self, addr: u64, len: u64) -> Result<(), u64> {
        if len == 0 {
            return Ok(());
        }
        let last = addr.wrapping_add(len - 1);
        if last < addr {
            return Err(addr);
        }
        for p in addr / PAGE_SIZE..=last / PAGE_SIZE {
            if !self.pages.contains_key(&p) {
                return Err((p * PAGE_SIZE).max(addr));
            }
        }
        Ok(())
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64, u64> {
        let mut b = [0u8; 8];
        self.read(addr, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn write_u64(&mut self, addr: u64, v: u64) -> Result<(), u64> {
        self.write(addr, &v.to_le_bytes())
    }

    /// Read up to `buf.len()` bytes, stopping at the first unmapped byte.
    fn fetch(&self, addr: u64, buf: &mut [u8]) -> usize {
        let mut n = 0;
        while n < buf.len() {
            let a = addr.wrapping_add(n as u64);
            let Some(page) = self.pages.get(&(a / PAGE_SIZE)) else {
                break;
            };
            let off = (a % PAGE_SIZE) as usize;
            let take = (buf.len() - n).min(PAGE_SIZE as usize - off);
            buf[n..n + take].copy_from_slice(&page[off..off + take]);
            n += take;
        }
        n
    }
}

/// One completed instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecRecord {
    pub addr: u64,
    pub insn: Insn,
    /// Pushed return address, present iff the instruction was a CALL.
    pub return_addr: Option<u64>,
    /// Tick at which the instruction completed.
    pub tick: u64,
}

impl ExecRecord {
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> u64 {
        self.insn.len() as u64
    }

    pub fn is_call(&self) -> bool {
        self.return_addr.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepEvent {
    Executed(ExecRecord),
    /// `record` is the instruction that ended execution (HALT, SYS exit), or
    /// `None` if execution stopped before an instruction could complete.
    Terminated {
        record: Option<ExecRecord>,
        termination: Termination,
    },
}

enum Trap {
    Invalid,
    Memory(u64),
    Stack,
}

enum Flow {
    Next,
    Jump(u64),
    Exit(u8),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineState {
    pub regs: [u64; 8],
    pub sp: u64,
    pub pc: u64,
    pub zflag: bool,
    pub memory: Memory,
    pub tick: u64,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub input: Vec<u8>,
    pub input_cursor: usize,
    /// Tick cost multiplier applied to every instruction except `sys 3`.
    pub degradation: u64,
    pub instructions_executed: u64,
    pub stack_limit: u64,
    pub stack_base: u64,
    /// Address of an 8-byte slot whose data accesses are counted in
    /// `watch_hits`.
    pub watch: Option<u64>,
    pub watch_hits: u64,
    halted: Option<Termination>,
}

impl MachineState {
    pub(super) fn new(p: &Program, layout: LoadLayout) -> Self {
        let mut memory = Memory::default();
        memory.map_zeroed(layout.code_base, p.code_pages());
        memory
            .write(layout.code_base, &p.image)
            .expect("code pages mapped");
        memory.map_zeroed(layout.stack_limit(), layout.stack_pages);
        MachineState {
            regs: [0; 8],
            sp: layout.stack_base,
            pc: layout.code_base + p.entry_offset,
            zflag: false,
            memory,
            tick: 0,
            stdout: Vec::new(),
            stderr: Vec::new(),
            input: Vec::new(),
            input_cursor: 0,
            degradation: 1,
            instructions_executed: 0,
            stack_limit: layout.stack_limit(),
            stack_base: layout.stack_base,
            watch: None,
            watch_hits: 0,
            halted: None,
        }
    }

    pub fn set_input(&mut self, input: &[u8]) {
        self.input = input.to_vec();
        self.input_cursor = 0;
    }

    pub fn termination(&self) -> Option<Termination> {
        self.halted
    }

    pub fn result(&self) -> ExecutionResult {
        ExecutionResult {
            termination: self.halted.unwrap_or(Termination::BudgetExhausted),
            ticks: self.tick,
            instructions_executed: self.instructions_executed,
            stdout: self.stdout.clone(),
            stderr: self.stderr.clone(),
        }
    }

    /// Live stack words from `sp` up to (excluding) `stack_base`.
    pub fn live_stack(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let start = self.sp.clamp(self.stack_limit, self.stack_base);
        (start..self.stack_base)
            .step_by(8)
            .filter_map(move |a| self.memory.read_u64(a).ok().map(|v| (a, v)))
    }

    /// Decode the instruction at `pc` without executing it.
    pub fn peek(&self) -> Result<Insn, Termination> {
        let mut buf = [0u8; MAX_INSN_LEN];
        let n = self.memory.fetch(self.pc, &mut buf);
        if n == 0 {
            return Err(Termination::MemoryFault(self.pc));
        }
        match decode(&buf[..n]) {
            Ok(i) => Ok(i),
            Err(DecodeError::Truncated) => {
                Err(Termination::MemoryFault(self.pc.wrapping_add(n as u64)))
            }
            Err(_) => Err(Termination::InvalidInstruction(self.pc)),
        }
    }

    /// Tick cost the instruction at `pc` would incur, if it decodes.
    pub fn next_cost(&self) -> Option<u64> {
        self.peek().ok().map(|i| self.cost_of(&i))
    }

    fn cost_of(&self, insn: &Insn) -> u64 {
        match insn {
            Insn::Sys(SYS_RECV_WAIT) => self.regs[0].max(1),
            _ => self.degradation,
        }
    }

    /// Like [`step`](Self::step) but terminates with `BudgetExhausted` once
    /// `tick >= budget`.
    pub fn step_within(&mut self, budget: u64) -> StepEvent {
        if self.halted.is_none() && self.tick >= budget {
            self.halted = Some(Termination::BudgetExhausted);
        }
        self.step()
    }

    /// Run until termination, calling `observe` after every completed
    /// instruction.
    pub fn run(
        &mut self,
        budget: u64,
        mut observe: impl FnMut(&MachineState, &ExecRecord),
    ) -> ExecutionResult {
        loop {
            match self.step_within(budget) {
                StepEvent::Executed(rec) => observe(self, &rec),
                StepEvent::Terminated { record, .. } => {
                    if let Some(rec) = record {
                        observe(self, &rec);
                    }
                    return self.result();
                }
            }
        }
    }

    pub fn step(&mut self) -> StepEvent {
        if let Some(termination) = self.halted {
            return StepEvent::Terminated {
                record: None,
                termination,
            };
        }
        let addr = self.pc;
        let insn = match self.peek() {
            Ok(i) => i,
            Err(t) => return self.stop(None, t),
        };
        let cost = self.cost_of(&insn);
        let next = addr.wrapping_add(insn.len() as u64);
        let flow = match self.execute(insn, next) {
            Ok(f) => f,
            Err(trap) => {
                let t = match trap {
                    Trap::Invalid => Termination::InvalidInstruction(addr),
                    Trap::Memory(a) => Termination::MemoryFault(a),
                    Trap::Stack => Termination::StackFault,
                };
                return self.stop(None, t);
            }
        };
        self.tick = self.tick.saturating_add(cost);
        self.instructions_executed += 1;
        let return_addr = matches!(insn, Insn::Call(_)).then_some(next);
        let rec = ExecRecord {
            addr,
            insn,
            return_addr,
            tick: self.tick,
        };
        match flow {
            Flow::Next => self.pc = next,
            Flow::Jump(t) => self.pc = t,
            Flow::Exit(code) => return self.stop(Some(rec), Termination::Exited(code)),
        }
        StepEvent::Executed(rec)
    }

    fn stop(&mut self, record: Option<ExecRecord>, termination: Termination) -> StepEvent {
        self.halted = Some(termination);
        StepEvent::Terminated {
            record,
            termination,
        }
    }

    fn reg(&self, r: Reg) -> u64 {
        match r.index() {
            8 => self.sp,
            i => self.regs[i as usize],
        }
    }

    fn set_reg(&mut self, r: Reg, v: u64) -> Result<(), Trap> {
        match r.index() {
            8 if v % 8 != 0 => return Err(Trap::Stack),
            8 => self.sp = v,
            i => self.regs[i as usize] = v,
        }
        Ok(())
    }

    fn base(&self, r: Reg, next: u64) -> u64 {
        if r == Reg::PC {
            next
        } else {
            self.reg(r)
        }
    }

    fn note(&mut self, addr: u64, len: u64) {
        if let Some(w) = self.watch {
            if addr < w.wrapping_add(8) && w < addr.wrapping_add(len) {
                self.watch_hits += 1;
            }
        }
    }

    fn load(&mut self, addr: u64) -> Result<u64, Trap> {
        let v = self.memory.read_u64(addr).map_err(Trap::Memory)?;
        self.note(addr, 8);
        Ok(v)
    }

    fn store(&mut self, addr: u64, v: u64) -> Result<(), Trap> {
        self.memory.write_u64(addr, v).map_err(Trap::Memory)?;
        self.note(addr, 8);
        Ok(())
    }

    fn stack_slot(&self, addr: u64) -> Result<u64, Trap> {
        if addr % 8 == 0
            && addr >= self.stack_limit
            && addr.checked_add(8).is_some_and(|e| e <= self.stack_base)
        {
            Ok(addr)
        } else {
            Err(Trap::Stack)
        }
    }

    fn push(&mut self, v: u64) -> Result<(), Trap> {
        let slot = self.stack_slot(self.sp.wrapping_sub(8))?;
        self.store(slot, v)?;
        self.sp = slot;
        Ok(())
    }

    fn pop(&mut self) -> Result<u64, Trap> {
        let slot = self.stack_slot(self.sp)?;
        let v = self.load(slot)?;
        self.sp = slot + 8;
        Ok(v)
    }

    fn execute(&mut self, insn: Insn, next: u64) -> Result<Flow, Trap> {
        let rel = |d: i32| next.wrapping_add(d as i64 as u64);
        match insn {
            Insn::Nop => {}
            Insn::Halt(c) => return Ok(Flow::Exit(c)),
            Insn::Movi(r, v) => self.set_reg(r, v)?,
            Insn::Mov(a, b) => self.set_reg(a, self.reg(b))?,
            Insn::Add(a, b) | Insn::Sub(a, b) | Insn::Xor(a, b) => {
                let (x, y) = (self.reg(a), self.reg(b));
                let v = match insn {
                    Insn::Add(..) => x.wrapping_add(y),
                    Insn::Sub(..) => x.wrapping_sub(y),
                    _ => x ^ y,
                };
                self.set_reg(a, v)?;
                self.zflag = v == 0;
            }
            Insn::Cmp(a, b) => self.zflag = self.reg(a) == self.reg(b),
            Insn::Cmpi(r, v) => self.zflag = self.reg(r) == v as i64 as u64,
            Insn::Jmp(d) => return Ok(Flow::Jump(rel(d))),
            Insn::Jz(d) => {
                return Ok(if self.zflag {
                    Flow::Jump(rel(d))
                } else {
                    Flow::Next
                })
            }
            Insn::Jnz(d) => {
                return Ok(if self.zflag {
                    Flow::Next
                } else {
                    Flow::Jump(rel(d))
                })
            }
            Insn::Call(d) => {
                self.push(next)?;
                return Ok(Flow::Jump(rel(d)));
            }
            Insn::Ret => return Ok(Flow::Jump(self.pop()?)),
            Insn::Push(r) => self.push(self.reg(r))?,
            Insn::Pop(r) => {
                let saved = self.sp;
                let v = self.pop()?;
                if let Err(t) = self.set_reg(r, v) {
                    self.sp = saved;
                    return Err(t);
                }
            }
            Insn::Load { dst, base, disp } => {
                let v = self.load(self.base(base, next).wrapping_add(disp as i64 as u64))?;
                self.set_reg(dst, v)?;
            }
            Insn::Store { base, disp, src } => {
                let ea = self.base(base, next).wrapping_add(disp as i64 as u64);
                self.store(ea, self.reg(src))?;
            }
            Insn::Lea { dst, base, disp } => {
                self.set_reg(dst, self.base(base, next).wrapping_add(disp as i64 as u64))?;
            }
            Insn::Sys(n) => return self.syscall(n),
        }
        Ok(Flow::Next)
    }

    fn syscall(&mut self, n: u8) -> Result<Flow, Trap> {
        match n {
            SYS_EXIT => return Ok(Flow::Exit(self.regs[0] as u8)),
            SYS_WRITE => {
                let (fd, addr, len) = (self.regs[0], self.regs[1], self.regs[2]);
                if fd != 1 && fd != 2 {
                    self.regs[0] = u64::MAX;
                    return Ok(Flow::Next);
                }
                self.memory.check_range(addr, len).map_err(Trap::Memory)?;
                let mut buf = vec![0u8; len as usize];
                self.memory.read(addr, &mut buf).map_err(Trap::Memory)?;
                self.note(addr, len);
                if fd == 1 {
                    self.stdout.extend_from_slice(&buf);
                } else {
                    self.stderr.extend_from_slice(&buf);
                }
                self.regs[0] = len;
            }
            SYS_READ => {
                let (addr, len) = (self.regs[1], self.regs[2]);
                let avail = (self.input.len() - self.input_cursor) as u64;
                let count = len.min(avail);
                let chunk = &self.input[self.input_cursor..self.input_cursor + count as usize];
                self.memory.write(addr, chunk).map_err(Trap::Memory)?;
                self.note(addr, count);
                self.input_cursor += count as usize;
                self.regs[0] = count;
            }
            SYS_RECV_WAIT => {}
            _ => return Err(Trap::Invalid),
        }
        Ok(Flow::Next)
    }
}
