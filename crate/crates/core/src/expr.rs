//! Arithmetic expressions in x, y, z used for coefficients and boundary data.
//!
//! Grammar: numbers, the variables `x`, `y`, `z`, the constants `pi` and
//! `e`, the operators `+ - * / ^` (with `^` right associative and binding
//! tighter than unary minus), parentheses and the functions
//! `exp sin cos tan sqrt log abs tanh`.

use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub struct ParseError {
    /// 1-based character column.
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "column {}: {}", self.column, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Func {
    Exp,
    Sin,
    Cos,
    Tan,
    Sqrt,
    Log,
    Abs,
    Tanh,
}

impl Func {
    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "exp" => Func::Exp,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "sqrt" => Func::Sqrt,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Exp => v.exp(),
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Tan => v.tan(),
            Func::Sqrt => v.sqrt(),
            Func::Log => v.ln(),
            Func::Abs => v.abs(),
            Func::Tanh => v.tanh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// Parsed expression.
#[derive(Clone, Debug, PartialEq)]
pub struct Expr {
    root: Node,
    source: String,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ParseError> {
        let chars: Vec<char> = src.chars().collect();
        let mut p = Parser { chars: &chars, pos: 0 };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos < chars.len() {
            return Err(p.error(format!("unexpected `{}`", chars[p.pos])));
        }
        Ok(Expr {
            root,
            source: src.to_string(),
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Evaluates at a point; missing coordinates are zero.
    pub fn eval(&self, p: &[f64]) -> f64 {
        eval(&self.root, p)
    }

    /// True when the expression does not reference any variable.
    pub fn is_constant(&self) -> bool {
        fn has_var(n: &Node) -> bool {
            match n {
                Node::Num(_) => false,
                Node::Var(_) => true,
                Node::Neg(a) | Node::Call(_, a) => has_var(a),
                Node::Bin(_, a, b) => has_var(a) || has_var(b),
            }
        }
        !has_var(&self.root)
    }
}

fn eval(n: &Node, p: &[f64]) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Var(i) => p.get(*i).copied().unwrap_or(0.0),
        Node::Neg(a) => -eval(a, p),
        Node::Call(f, a) => f.apply(eval(a, p)),
        Node::Bin(op, a, b) => {
            let (x, y) = (eval(a, p), eval(b, p));
            match op {
                '+' => x + y,
                '-' => x - y,
                '*' => x * y,
                '/' => x / y,
                _ => x.powf(y),
            }
        }
    }
}

struct Parser<'a> {
    chars: &'a [char],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: String) -> ParseError {
        ParseError {
            column: self.pos + 1,
            message,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        while let Some(c @ ('+' | '-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(c, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(c @ ('*' | '/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(c, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        match self.peek() {
            Some('-') => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.atom()?;
        if self.peek() == Some('^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin('^', Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        match self.peek() {
            None => Err(self.error("unexpected end of expression".into())),
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(')') {
                    return Err(self.error("expected `)`".into()));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_alphabetic() || c == '_' => {
                let start = self.pos;
                while self.pos < self.chars.len() && (self.chars[self.pos].is_alphanumeric() || self.chars[self.pos] == '_') {
                    self.pos += 1;
                }
                let name: String = self.chars[start..self.pos].iter().collect();
                match name.as_str() {
                    "x" => Ok(Node::Var(0)),
                    "y" => Ok(Node::Var(1)),
                    "z" => Ok(Node::Var(2)),
                    "pi" => Ok(Node::Num(std::f64::consts::PI)),
                    "e" => Ok(Node::Num(std::f64::consts::E)),
                    _ => {
                        let Some(f) = Func::from_name(&name) else {
                            self.pos = start;
                            return Err(self.error(format!("unknown identifier `{name}`")));
                        };
                        if self.peek() != Some('(') {
                            return Err(self.error(format!("expected `(` after `{name}`")));
                        }
                        self.pos += 1;
                        let arg = self.expr()?;
                        if self.peek() != Some(')') {
                            return Err(self.error("expected `)`".into()));
                        }
                        self.pos += 1;
                        Ok(Node::Call(f, Box::new(arg)))
                    }
                }
            }
            Some(c) => Err(self.error(format!("unexpected `{c}`"))),
        }
    }

    fn number(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        let c = self.chars;
        while self.pos < c.len() && (c[self.pos].is_ascii_digit() || c[self.pos] == '.') {
            self.pos += 1;
        }
        if self.pos < c.len() && (c[self.pos] == 'e' || c[self.pos] == 'E') {
            let mut q = self.pos + 1;
            if q < c.len() && (c[q] == '+' || c[q] == '-') {
                q += 1;
            }
            if q < c.len() && c[q].is_ascii_digit() {
                self.pos = q;
                while self.pos < c.len() && c[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let text: String = c[start..self.pos].iter().collect();
        text.parse::<f64>().map(Node::Num).map_err(|_| ParseError {
            column: start + 1,
            message: format!("malformed number `{text}`"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, p: &[f64]) -> f64 {
        Expr::parse(s).unwrap().eval(p)
    }

    #[test]
    fn precedence() {
        assert_eq!(ev("1 + 2*3", &[]), 7.0);
        assert_eq!(ev("-2^2", &[]), -4.0);
        assert_eq!(ev("2^3^2", &[]), 512.0);
        assert_eq!(ev("(1+2)*3", &[]), 9.0);
        assert_eq!(ev("8/4/2", &[]), 1.0);
    }

    #[test]
    fn variables_and_functions() {
        assert!((ev("sin(pi*x)*cos(y)", &[0.5, 0.0]) - 1.0).abs() < 1e-15);
        assert!((ev("exp(-((x-0.5)^2+(y-0.5)^2)/0.05)", &[0.5, 0.5]) - 1.0).abs() < 1e-15);
        assert_eq!(ev("sqrt(z)", &[0.0, 0.0, 4.0]), 2.0);
        assert_eq!(ev("1.5e-1*2", &[]), 0.3);
        assert_eq!(ev("e", &[]), std::f64::consts::E);
    }

    #[test]
    fn errors_carry_columns() {
        let e = Expr::parse("1 + foo(x)").unwrap_err();
        assert_eq!(e.column, 5);
        let e = Expr::parse("(1 + 2").unwrap_err();
        assert!(e.message.contains(')'));
        let e = Expr::parse("1 2").unwrap_err();
        assert_eq!(e.column, 3);
        assert!(Expr::parse("").is_err());
        assert!(Expr::parse("γ = -1").is_err());
    }

    #[test]
    fn constant_detection() {
        assert!(Expr::parse("2*pi").unwrap().is_constant());
        assert!(!Expr::parse("1+x").unwrap().is_constant());
    }
}
