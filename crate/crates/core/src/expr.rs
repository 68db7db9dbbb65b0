//! Scalar expressions in `(t, x1, x2, y1, y2)` used to describe coefficient entries.
//!
//! Grammar (usual precedence, `^` right-associative and binding tighter than unary minus):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := ('-' | '+') unary | power
//! power := atom ('^' unary)?
//! atom  := number | var | 'pi' | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! Evaluation reduces `y1`, `y2` modulo 1, so every expression is periodic in the
//! fast variable by construction. [`Expr::eval_unreduced`] skips that reduction and
//! is what the periodicity validator samples.

use std::fmt;

use thiserror::Error;

/// Parse failure with the byte offset at which it was detected.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("unexpected character '{ch}' at position {pos}")]
    UnexpectedChar { ch: char, pos: usize },
    #[error("unexpected end of input at position {pos}")]
    UnexpectedEnd { pos: usize },
    #[error("unknown identifier '{name}' at position {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("invalid number '{text}' at position {pos}")]
    InvalidNumber { text: String, pos: usize },
    #[error("expected {expected} at position {pos}")]
    Expected { expected: &'static str, pos: usize },
    #[error("trailing input at position {pos}")]
    Trailing { pos: usize },
}

/// Independent variable of a coefficient expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    X1,
    X2,
    Y1,
    Y2,
}

impl Var {
    fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::X1 => "x1",
            Var::X2 => "x2",
            Var::Y1 => "y1",
            Var::Y2 => "y2",
        }
    }
}

/// Supported elementary functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

/// Expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Pi,
    Var(Var),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// Evaluation point for coefficient expressions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub t: f64,
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Point {
    pub fn new(t: f64, x: [f64; 2], y: [f64; 2]) -> Self {
        Self { t, x, y }
    }
}

/// A parsed expression together with its variable usage.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    root: Node,
    uses: [bool; 5],
}

fn var_index(v: Var) -> usize {
    match v {
        Var::T => 0,
        Var::X1 => 1,
        Var::X2 => 2,
        Var::Y1 => 3,
        Var::Y2 => 4,
    }
}

fn collect_vars(node: &Node, uses: &mut [bool; 5]) {
    match node {
        Node::Const(_) | Node::Pi => {}
        Node::Var(v) => uses[var_index(*v)] = true,
        Node::Neg(a) | Node::Call(_, a) => collect_vars(a, uses),
        Node::Bin(_, a, b) => {
            collect_vars(a, uses);
            collect_vars(b, uses);
        }
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self, ExprError> {
        let mut p = Parser { src: src.as_bytes(), pos: 0 };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos < p.src.len() {
            return Err(ExprError::Trailing { pos: p.pos });
        }
        Ok(Self::from_node(root))
    }

    pub fn from_node(root: Node) -> Self {
        let mut uses = [false; 5];
        collect_vars(&root, &mut uses);
        Self { root, uses }
    }

    pub fn constant(value: f64) -> Self {
        Self::from_node(Node::Const(value))
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn node(&self) -> &Node {
        &self.root
    }

    pub fn uses(&self, v: Var) -> bool {
        self.uses[var_index(v)]
    }

    pub fn depends_on_t(&self) -> bool {
        self.uses(Var::T)
    }

    pub fn depends_on_x(&self) -> bool {
        self.uses(Var::X1) || self.uses(Var::X2)
    }

    pub fn depends_on_y(&self) -> bool {
        self.uses(Var::Y1) || self.uses(Var::Y2)
    }

    /// Value when the expression uses no variables.
    pub fn constant_value(&self) -> Option<f64> {
        if self.uses.iter().any(|&u| u) {
            None
        } else {
            Some(eval_node(&self.root, &Point::default()))
        }
    }

    /// True when the expression is syntactically free of variables and evaluates to zero.
    pub fn is_zero(&self) -> bool {
        self.constant_value() == Some(0.0)
    }

    /// Evaluates with `y` reduced into `[0, 1)`.
    pub fn eval(&self, p: &Point) -> f64 {
        let q = Point { t: p.t, x: p.x, y: [p.y[0].rem_euclid(1.0), p.y[1].rem_euclid(1.0)] };
        eval_node(&self.root, &q)
    }

    /// Evaluates without reducing `y`.
    pub fn eval_unreduced(&self, p: &Point) -> f64 {
        eval_node(&self.root, p)
    }
}

fn eval_node(node: &Node, p: &Point) -> f64 {
    match node {
        Node::Const(c) => *c,
        Node::Pi => std::f64::consts::PI,
        Node::Var(v) => match v {
            Var::T => p.t,
            Var::X1 => p.x[0],
            Var::X2 => p.x[1],
            Var::Y1 => p.y[0],
            Var::Y2 => p.y[1],
        },
        Node::Neg(a) => -eval_node(a, p),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval_node(a, p), eval_node(b, p));
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => a / b,
                BinOp::Pow => a.powf(b),
            }
        }
        Node::Call(f, a) => {
            let a = eval_node(a, p);
            match f {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Exp => a.exp(),
            }
        }
    }
}

// Fully parenthesised output so that printing and re-parsing reproduces the tree.
impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Const(c) => {
                if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) {
                    write!(f, "(-{:?})", -c)
                } else {
                    write!(f, "{c:?}")
                }
            }
            Node::Pi => write!(f, "pi"),
            Node::Var(v) => write!(f, "{}", v.name()),
            Node::Neg(a) => write!(f, "(-{a})"),
            Node::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Node::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

impl std::str::FromStr for Expr {
    type Err = ExprError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Expr::parse(s)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == b'+' { BinOp::Add } else { BinOp::Sub };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            let op = if c == b'*' { BinOp::Mul } else { BinOp::Div };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let start = match self.peek() {
            None => return Err(ExprError::UnexpectedEnd { pos: self.pos }),
            Some(_) => self.pos,
        };
        let c = self.src[start];
        if c == b'(' {
            self.pos += 1;
            let inner = self.expr()?;
            if self.peek() != Some(b')') {
                return Err(ExprError::Expected { expected: "')'", pos: self.pos });
            }
            self.pos += 1;
            return Ok(inner);
        }
        if c.is_ascii_digit() || c == b'.' {
            return self.number(start);
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while self.pos < self.src.len()
                && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
            {
                self.pos += 1;
            }
            let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or_default();
            let var = match name {
                "t" => Some(Var::T),
                "x1" => Some(Var::X1),
                "x2" => Some(Var::X2),
                "y1" => Some(Var::Y1),
                "y2" => Some(Var::Y2),
                _ => None,
            };
            if let Some(v) = var {
                return Ok(Node::Var(v));
            }
            if name == "pi" {
                return Ok(Node::Pi);
            }
            let func = match name {
                "sin" => Func::Sin,
                "cos" => Func::Cos,
                "exp" => Func::Exp,
                _ => return Err(ExprError::UnknownIdentifier { name: name.to_string(), pos: start }),
            };
            if self.peek() != Some(b'(') {
                return Err(ExprError::Expected { expected: "'(' after function name", pos: self.pos });
            }
            self.pos += 1;
            let arg = self.expr()?;
            if self.peek() != Some(b')') {
                return Err(ExprError::Expected { expected: "')'", pos: self.pos });
            }
            self.pos += 1;
            return Ok(Node::Call(func, Box::new(arg)));
        }
        let ch = std::str::from_utf8(&self.src[start..]).ok().and_then(|s| s.chars().next()).unwrap_or('?');
        Err(ExprError::UnexpectedChar { ch, pos: start })
    }

    fn number(&mut self, start: usize) -> Result<Node, ExprError> {
        let s = self.src;
        while self.pos < s.len() && (s[self.pos].is_ascii_digit() || s[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < s.len() && (s[self.pos] == b'e' || s[self.pos] == b'E') {
            let mut look = self.pos + 1;
            if look < s.len() && (s[look] == b'+' || s[look] == b'-') {
                look += 1;
            }
            if look < s.len() && s[look].is_ascii_digit() {
                self.pos = look;
                while self.pos < s.len() && s[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let text = std::str::from_utf8(&s[start..self.pos]).unwrap_or_default();
        text.parse::<f64>()
            .map(Node::Const)
            .map_err(|_| ExprError::InvalidNumber { text: text.to_string(), pos: start })
    }
}
