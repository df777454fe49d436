#include "cosine/exprlang.hpp"

#include "cosine/error.hpp"
#include "cosine/numeric.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <set>
#include <unordered_map>
#include <unordered_set>

namespace cosine::expr {

std::string_view variable_name(Variable v) {
  switch (v) {
    case Variable::Xi: return "xi";
    case Variable::Xj: return "xj";
    case Variable::Diff: return "diff";
    case Variable::X: return "x";
    case Variable::H: return "h";
    case Variable::Deg: return "deg";
  }
  return "?";
}

bool in_scope(Variable v, VarScope scope) {
  const bool message_var = v == Variable::Xi || v == Variable::Xj || v == Variable::Diff;
  return scope == VarScope::Message ? message_var : !message_var;
}

namespace {

std::optional<Variable> variable_from_name(std::string_view name) {
  if (name == "xi") return Variable::Xi;
  if (name == "xj") return Variable::Xj;
  if (name == "diff") return Variable::Diff;
  if (name == "x") return Variable::X;
  if (name == "h") return Variable::H;
  if (name == "deg") return Variable::Deg;
  return std::nullopt;
}

std::size_t var_index(Variable v) { return static_cast<std::size_t>(v); }

// ───────────────────────────── tokenizer ─────────────────────────────

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

const std::unordered_set<std::string_view> kAllowedNamespaces = {
    "torch", "F", "torch.nn.functional", "nn.functional"};

}  // namespace

std::vector<Token> tokenize(std::string_view source) {
  if (source.size() >= kMaxSourceLength) {
    throw Error(ErrorCode::SourceTooLong,
                std::to_string(source.size()) + " characters (limit " +
                    std::to_string(kMaxSourceLength) + ")");
  }
  std::vector<Token> out;
  std::size_t i = 0;
  const std::size_t n = source.size();
  while (i < n) {
    const char c = source[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    Token tok;
    tok.position = i;
    if (std::isdigit(static_cast<unsigned char>(c)) ||
        (c == '.' && i + 1 < n && std::isdigit(static_cast<unsigned char>(source[i + 1])))) {
      std::size_t j = i;
      while (j < n && std::isdigit(static_cast<unsigned char>(source[j]))) ++j;
      if (j < n && source[j] == '.') {
        ++j;
        while (j < n && std::isdigit(static_cast<unsigned char>(source[j]))) ++j;
      }
      if (j < n && (source[j] == 'e' || source[j] == 'E')) {
        std::size_t k = j + 1;
        if (k < n && (source[k] == '+' || source[k] == '-')) ++k;
        if (k < n && std::isdigit(static_cast<unsigned char>(source[k]))) {
          while (k < n && std::isdigit(static_cast<unsigned char>(source[k]))) ++k;
          j = k;
        }
      }
      std::string text(source.substr(i, j - i));
      // from_chars rejects a leading '.', and "1." is valid Python.
      std::string normalized = text;
      if (normalized.front() == '.') normalized.insert(normalized.begin(), '0');
      if (auto dot = normalized.find('.');
          dot != std::string::npos &&
          (dot + 1 == normalized.size() || !std::isdigit(static_cast<unsigned char>(normalized[dot + 1])))) {
        normalized.insert(dot + 1, "0");
      }
      double value = 0.0;
      if (!parse_double(normalized, value) || !std::isfinite(value)) {
        throw Error(ErrorCode::SyntaxError, "malformed number '" + text + "'", i);
      }
      if (j < n && ident_start(source[j])) {
        throw Error(ErrorCode::SyntaxError, "malformed number '" + text + source[j] + "'", i);
      }
      tok.kind = TokenKind::Number;
      tok.text = std::move(text);
      tok.number = value;
      out.push_back(std::move(tok));
      i = j;
      continue;
    }
    if (c == '.' && source.substr(i, 3) == "...") {
      tok.kind = TokenKind::Ellipsis;
      tok.text = "...";
      out.push_back(std::move(tok));
      i += 3;
      continue;
    }
    if (ident_start(c)) {
      std::size_t j = i;
      std::vector<std::string> parts;
      while (true) {
        std::size_t k = j;
        while (k < n && ident_char(source[k])) ++k;
        parts.emplace_back(source.substr(j, k - j));
        j = k;
        if (j + 1 < n && source[j] == '.' && ident_start(source[j + 1])) {
          ++j;
          continue;
        }
        break;
      }
      for (const auto& p : parts) {
        if (p.front() == '_' || p.find("__") != std::string::npos) {
          throw Error(ErrorCode::ForbiddenConstruct, "underscore attribute '" + p + "'", i);
        }
      }
      std::string ns;
      for (std::size_t p = 0; p + 1 < parts.size(); ++p) {
        if (!ns.empty()) ns += '.';
        ns += parts[p];
      }
      tok.qualified = std::string(source.substr(i, j - i));
      if (!ns.empty() && !kAllowedNamespaces.contains(ns)) {
        if (ns == "np" || ns == "numpy" || ns == "math" || ns.rfind("np.", 0) == 0 ||
            ns.rfind("numpy.", 0) == 0 || ns.rfind("math.", 0) == 0) {
          throw Error(ErrorCode::ForbiddenConstruct, "only torch expressions are allowed: '" + tok.qualified + "'", i);
        }
        throw Error(ErrorCode::ForbiddenConstruct, "attribute access '" + tok.qualified + "'", i);
      }
      tok.kind = TokenKind::Identifier;
      tok.text = parts.back();
      out.push_back(std::move(tok));
      i = j;
      continue;
    }
    switch (c) {
      case '+':
      case '-':
      case '/':
        tok.kind = TokenKind::Operator;
        tok.text = std::string(1, c);
        ++i;
        break;
      case '*':
        tok.kind = TokenKind::Operator;
        if (i + 1 < n && source[i + 1] == '*') {
          tok.text = "**";
          i += 2;
        } else {
          tok.text = "*";
          ++i;
        }
        break;
      case '(': tok.kind = TokenKind::LParen; tok.text = "("; ++i; break;
      case ')': tok.kind = TokenKind::RParen; tok.text = ")"; ++i; break;
      case '[': tok.kind = TokenKind::LBracket; tok.text = "["; ++i; break;
      case ']': tok.kind = TokenKind::RBracket; tok.text = "]"; ++i; break;
      case ',': tok.kind = TokenKind::Comma; tok.text = ","; ++i; break;
      case ':': tok.kind = TokenKind::Colon; tok.text = ":"; ++i; break;
      case '=': tok.kind = TokenKind::Assign; tok.text = "="; ++i; break;
      default:
        throw Error(ErrorCode::UnknownCharacter, std::string("'") + c + "'", i);
    }
    out.push_back(std::move(tok));
  }
  Token end;
  end.kind = TokenKind::End;
  end.position = n;
  out.push_back(std::move(end));
  return out;
}

// ───────────────────────────── node helpers ─────────────────────────────

namespace {

NodePtr make_const(double v) {
  auto n = std::make_shared<Node>();
  n->op = Op::Const;
  n->value = v;
  return n;
}

NodePtr make_var(Variable v) {
  auto n = std::make_shared<Node>();
  n->op = Op::Var;
  n->var = v;
  return n;
}

NodePtr make_slice(Variable v, int channel) {
  auto n = std::make_shared<Node>();
  n->op = Op::Slice;
  n->var = v;
  n->channel = channel;
  return n;
}

bool same_tree(const Node& a, const Node& b) {
  if (a.op != b.op || a.args.size() != b.args.size()) return false;
  switch (a.op) {
    case Op::Const:
      if (!(a.value == b.value) || std::signbit(a.value) != std::signbit(b.value)) return false;
      break;
    case Op::Var:
      if (a.var != b.var) return false;
      break;
    case Op::Slice:
      if (a.var != b.var || a.channel != b.channel) return false;
      break;
    default: break;
  }
  for (std::size_t i = 0; i < a.args.size(); ++i) {
    if (!same_tree(*a.args[i], *b.args[i])) return false;
  }
  return true;
}

bool is_integer_const(const Node& n) {
  return n.op == Op::Const && std::isfinite(n.value) && std::floor(n.value) == n.value &&
         std::fabs(n.value) <= 1e6;
}

constexpr double kUnbounded = -std::numeric_limits<double>::infinity();

// Guaranteed lower bound of a node's value over all finite inputs with
// deg >= 0; -inf when nothing can be proven.
double lower_bound(const Node& n) {
  switch (n.op) {
    case Op::Const: return n.value;
    case Op::Var:
    case Op::Slice: return n.var == Variable::Deg ? 0.0 : kUnbounded;
    case Op::Abs:
    case Op::Norm:
    case Op::Relu:
    case Op::Sqrt:
    case Op::Exp:
    case Op::Sigmoid:
    case Op::Softplus: return 0.0;
    case Op::Sin:
    case Op::Cos:
    case Op::Tanh: return -1.0;
    case Op::Log: {
      const double a = lower_bound(*n.args[0]);
      return std::log(std::max(a, kEpsilon));
    }
    case Op::Add: return lower_bound(*n.args[0]) + lower_bound(*n.args[1]);
    case Op::Mul: {
      if (same_tree(*n.args[0], *n.args[1])) return 0.0;
      const double a = lower_bound(*n.args[0]);
      const double b = lower_bound(*n.args[1]);
      if (a >= 0.0 && b >= 0.0) return a * b;
      return kUnbounded;
    }
    case Op::Div: {
      const double a = lower_bound(*n.args[0]);
      const double b = lower_bound(*n.args[1]);
      return (a >= 0.0 && b >= 0.0) ? 0.0 : kUnbounded;
    }
    case Op::Pow: {
      const Node& e = *n.args[1];
      if (is_integer_const(e) && static_cast<long long>(e.value) % 2 == 0) return 0.0;
      if (!is_integer_const(e)) return 0.0;  // base clamped to >= 0
      return lower_bound(*n.args[0]) >= 0.0 ? 0.0 : kUnbounded;
    }
    case Op::Max:
    case Op::ClampMin: return std::max(lower_bound(*n.args[0]), lower_bound(*n.args[1]));
    case Op::Min: return std::min(lower_bound(*n.args[0]), lower_bound(*n.args[1]));
    default: return kUnbounded;
  }
}

NodePtr make_unary(Op op, NodePtr a) {
  if (op == Op::Neg && a->op == Op::Const) return make_const(-a->value);
  auto n = std::make_shared<Node>();
  n->op = op;
  n->args.push_back(std::move(a));
  return n;
}

NodePtr make_binary(Op op, NodePtr a, NodePtr b) {
  auto n = std::make_shared<Node>();
  n->op = op;
  if (op == Op::Div) n->guarded = lower_bound(*b) < kEpsilon;
  n->args.push_back(std::move(a));
  n->args.push_back(std::move(b));
  return n;
}

// ───────────────────────────── parser ─────────────────────────────

const std::unordered_map<std::string_view, Op> kUnaryFunctions = {
    {"abs", Op::Abs},         {"sin", Op::Sin},       {"cos", Op::Cos},   {"tan", Op::Tan},
    {"exp", Op::Exp},         {"log", Op::Log},       {"sqrt", Op::Sqrt}, {"tanh", Op::Tanh},
    {"sigmoid", Op::Sigmoid}, {"relu", Op::Relu},     {"softplus", Op::Softplus},
    {"neg", Op::Neg},         {"negative", Op::Neg},
};

const std::unordered_map<std::string_view, Op> kBinaryFunctions = {
    {"pow", Op::Pow},     {"minimum", Op::Min}, {"maximum", Op::Max}, {"min", Op::Min},
    {"max", Op::Max},     {"fmin", Op::Min},    {"fmax", Op::Max},    {"clamp_min", Op::ClampMin},
};

const std::unordered_set<std::string_view> kForbiddenNames = {
    "view",    "reshape", "permute", "transpose", "unsqueeze", "squeeze", "tensor", "zeros",
    "ones",    "cat",     "stack",   "numpy",     "np",        "math",    "msg",    "message",
    "eval",    "exec",    "import",  "lambda",    "if",        "else",    "for",    "while",
    "in",      "and",     "or",      "not",       "is",        "def",     "return", "expand",
    "repeat",  "flatten", "gather",  "einsum",    "matmul",    "mm",      "bmm",    "sum",
    "mean",    "empty",   "full",    "rand",      "randn",     "arange",  "linspace",
};

struct CallArg {
  std::string keyword;  // empty for positional
  NodePtr expr;
  std::optional<bool> flag;
  bool infinite = false;  // +inf / -inf literal
  double infinite_sign = 1.0;
  std::size_t position = 0;
};

class Parser {
public:
  explicit Parser(std::span<const Token> tokens) : toks_(tokens) {
    if (toks_.empty() || toks_.back().kind != TokenKind::End) {
      throw Error(ErrorCode::SyntaxError, "token stream must end with End");
    }
  }

  NodePtr parse_all() {
    NodePtr e = parse_additive();
    if (peek().kind != TokenKind::End) fail("end of expression");
    return e;
  }

private:
  const Token& peek(std::size_t ahead = 0) const {
    return toks_[std::min(pos_ + ahead, toks_.size() - 1)];
  }
  const Token& take() {
    const Token& t = toks_[pos_];
    if (pos_ + 1 < toks_.size()) ++pos_;
    return t;
  }
  bool is_op(std::string_view op) const {
    return peek().kind == TokenKind::Operator && peek().text == op;
  }
  [[noreturn]] void fail(std::string_view expected) const {
    const Token& t = peek();
    if (t.kind == TokenKind::Identifier && kForbiddenNames.contains(t.text)) {
      throw Error(ErrorCode::ForbiddenConstruct, "'" + t.qualified + "' is not allowed", t.position);
    }
    std::string got = t.kind == TokenKind::End ? "end of input" : "'" + t.text + "'";
    throw Error(ErrorCode::SyntaxError, "expected " + std::string(expected) + ", got " + got, t.position);
  }
  void expect(TokenKind kind, std::string_view what) {
    if (peek().kind != kind) fail(what);
    take();
  }

  NodePtr parse_additive() {
    NodePtr lhs = parse_term();
    while (is_op("+") || is_op("-")) {
      const Op op = take().text == "+" ? Op::Add : Op::Sub;
      lhs = make_binary(op, lhs, parse_term());
    }
    return lhs;
  }

  NodePtr parse_term() {
    NodePtr lhs = parse_unary();
    while (is_op("*") || is_op("/")) {
      const Op op = take().text == "*" ? Op::Mul : Op::Div;
      lhs = make_binary(op, lhs, parse_unary());
    }
    return lhs;
  }

  // Python precedence: unary minus binds looser than ** on its right
  // (-x**2 == -(x**2)) and tighter than * and /.
  NodePtr parse_unary() {
    if (is_op("-")) {
      take();
      return make_unary(Op::Neg, parse_unary());
    }
    if (is_op("+")) {
      take();
      return parse_unary();
    }
    return parse_power();
  }

  NodePtr parse_power() {
    NodePtr base = parse_primary();
    if (is_op("**")) {
      take();
      return make_binary(Op::Pow, base, parse_unary());
    }
    return base;
  }

  NodePtr parse_primary() {
    const Token& t = peek();
    switch (t.kind) {
      case TokenKind::Number: {
        take();
        return make_const(t.number);
      }
      case TokenKind::LParen: {
        take();
        NodePtr e = parse_additive();
        expect(TokenKind::RParen, "')'");
        reject_subscript();
        return e;
      }
      case TokenKind::Identifier: return parse_identifier();
      default: fail("an expression");
    }
  }

  void reject_subscript() const {
    if (peek().kind == TokenKind::LBracket) {
      throw Error(ErrorCode::ForbiddenConstruct, "only variables can be channel-sliced", peek().position);
    }
  }

  NodePtr parse_identifier() {
    const Token& t = take();
    const bool call = peek().kind == TokenKind::LParen;
    if (kForbiddenNames.contains(t.text)) {
      throw Error(ErrorCode::ForbiddenConstruct, "'" + t.qualified + "' is not allowed", t.position);
    }
    if (call) return parse_call(t);
    if (t.text == "pi") return make_const(std::numbers::pi);
    if (t.qualified != t.text) {
      throw Error(ErrorCode::UnknownIdentifier, "'" + t.qualified + "'", t.position);
    }
    if (auto v = variable_from_name(t.text)) {
      if (peek().kind == TokenKind::LBracket) return parse_slice(*v);
      return make_var(*v);
    }
    if (t.text == "inf") {
      throw Error(ErrorCode::SyntaxError, "'inf' is only allowed as a clamp bound", t.position);
    }
    if (t.text == "True" || t.text == "False" || t.text == "None") {
      throw Error(ErrorCode::SyntaxError, "unexpected '" + t.text + "'", t.position);
    }
    throw Error(ErrorCode::UnknownIdentifier, "'" + t.text + "'", t.position);
  }

  NodePtr parse_slice(Variable v) {
    const std::size_t at = peek().position;
    take();  // [
    expect(TokenKind::Ellipsis, "'...' in channel slice");
    expect(TokenKind::Comma, "',' in channel slice");
    const Token start = peek();
    if (start.kind != TokenKind::Number) fail("channel index");
    take();
    if (peek().kind == TokenKind::RBracket) {
      throw Error(ErrorCode::ForbiddenConstruct, "x[..., c] drops the channel axis; write x[..., c:c+1]", at);
    }
    expect(TokenKind::Colon, "':' in channel slice");
    const Token stop = peek();
    if (stop.kind != TokenKind::Number) fail("channel slice end");
    take();
    expect(TokenKind::RBracket, "']'");
    auto is_index = [](const Token& tk) {
      return tk.number >= 0 && std::floor(tk.number) == tk.number &&
             tk.text.find_first_of(".eE") == std::string::npos;
    };
    if (!is_index(start) || !is_index(stop) || stop.number != start.number + 1) {
      throw Error(ErrorCode::SyntaxError, "channel slice must have the form c:c+1", at);
    }
    reject_subscript();
    return make_slice(v, static_cast<int>(start.number));
  }

  CallArg parse_arg() {
    CallArg arg;
    arg.position = peek().position;
    if (peek().kind == TokenKind::Identifier && peek(1).kind == TokenKind::Assign) {
      arg.keyword = take().text;
      take();  // =
    }
    // Flags and infinities are only meaningful as call arguments.
    const bool negated = is_op("-") && peek(1).kind == TokenKind::Identifier && peek(1).text == "inf";
    if (negated) take();
    if (peek().kind == TokenKind::Identifier && peek(1).kind != TokenKind::LParen) {
      const std::string& name = peek().text;
      if (name == "True" || name == "False") {
        arg.flag = name == "True";
        take();
        return arg;
      }
      if (name == "inf") {
        arg.infinite = true;
        arg.infinite_sign = negated ? -1.0 : 1.0;
        take();
        return arg;
      }
    }
    if (negated) fail("'inf'");
    arg.expr = parse_additive();
    return arg;
  }

  std::vector<CallArg> parse_args() {
    expect(TokenKind::LParen, "'('");
    std::vector<CallArg> args;
    if (peek().kind != TokenKind::RParen) {
      while (true) {
        args.push_back(parse_arg());
        if (peek().kind == TokenKind::Comma) {
          take();
          if (peek().kind == TokenKind::RParen) break;
          continue;
        }
        break;
      }
    }
    expect(TokenKind::RParen, "')' or ','");
    return args;
  }

  static void require_positional(const Token& fn, const std::vector<CallArg>& args, std::size_t count) {
    std::size_t positional = 0;
    for (const auto& a : args) {
      if (!a.keyword.empty()) {
        throw Error(ErrorCode::ArityMismatch,
                    "'" + fn.qualified + "' takes no keyword argument '" + a.keyword + "'", a.position);
      }
      if (!a.expr) throw Error(ErrorCode::SyntaxError, "expected an expression argument", a.position);
      ++positional;
    }
    if (positional != count) {
      throw Error(ErrorCode::ArityMismatch,
                  "'" + fn.qualified + "' expects " + std::to_string(count) + " argument(s), got " +
                      std::to_string(positional),
                  fn.position);
    }
  }

  NodePtr parse_call(const Token& fn) {
    const std::string& name = fn.text;
    if (variable_from_name(name)) {
      throw Error(ErrorCode::SyntaxError, "'" + name + "' is not callable", fn.position);
    }
    std::vector<CallArg> args = parse_args();
    reject_subscript();

    if (auto it = kUnaryFunctions.find(name); it != kUnaryFunctions.end()) {
      require_positional(fn, args, 1);
      return make_unary(it->second, args[0].expr);
    }
    if (name == "square") {
      require_positional(fn, args, 1);
      return make_binary(Op::Pow, args[0].expr, make_const(2.0));
    }
    if (name == "zeros_like" || name == "ones_like") {
      require_positional(fn, args, 1);
      return make_const(name == "zeros_like" ? 0.0 : 1.0);
    }
    if (auto it = kBinaryFunctions.find(name); it != kBinaryFunctions.end()) {
      require_positional(fn, args, 2);
      return make_binary(it->second, args[0].expr, args[1].expr);
    }
    if (name == "clamp" || name == "clip") return build_clamp(fn, args);
    if (name == "norm") return build_norm(fn, args);
    throw Error(ErrorCode::UnknownFunction, "'" + fn.qualified + "'", fn.position);
  }

  NodePtr build_clamp(const Token& fn, const std::vector<CallArg>& args) {
    if (args.empty() || !args[0].keyword.empty() || !args[0].expr) {
      throw Error(ErrorCode::ArityMismatch, "'" + fn.qualified + "' needs an input argument", fn.position);
    }
    const CallArg* lo = nullptr;
    const CallArg* hi = nullptr;
    std::size_t positional = 1;
    for (std::size_t i = 1; i < args.size(); ++i) {
      const CallArg& a = args[i];
      const CallArg** slot = nullptr;
      if (a.keyword.empty()) {
        slot = positional == 1 ? &lo : positional == 2 ? &hi : nullptr;
        ++positional;
      } else if (a.keyword == "min") {
        slot = &lo;
      } else if (a.keyword == "max") {
        slot = &hi;
      }
      if (!slot || *slot || a.flag) {
        throw Error(ErrorCode::ArityMismatch, "bad argument to '" + fn.qualified + "'", a.position);
      }
      *slot = &a;
    }
    if (!lo && !hi) {
      throw Error(ErrorCode::ArityMismatch, "'" + fn.qualified + "' needs min= or max=", fn.position);
    }
    NodePtr out = args[0].expr;
    if (lo) {
      if (lo->infinite) {
        if (lo->infinite_sign > 0) throw Error(ErrorCode::SyntaxError, "min=inf", lo->position);
      } else {
        out = make_binary(Op::ClampMin, out, lo->expr);
      }
    }
    if (hi) {
      if (hi->infinite) {
        if (hi->infinite_sign < 0) throw Error(ErrorCode::SyntaxError, "max=-inf", hi->position);
      } else {
        out = make_binary(Op::Min, out, hi->expr);
      }
    }
    return out;
  }

  NodePtr build_norm(const Token& fn, const std::vector<CallArg>& args) {
    const std::string form = "torch.norm must be written as torch.norm(e, dim=-1, keepdim=True)";
    if (args.size() != 3 || !args[0].keyword.empty() || !args[0].expr) {
      throw Error(ErrorCode::SyntaxError, form, fn.position);
    }
    bool dim_ok = false;
    bool keep_ok = false;
    for (std::size_t i = 1; i < args.size(); ++i) {
      const CallArg& a = args[i];
      if (a.keyword == "dim" && a.expr && a.expr->op == Op::Const && a.expr->value == -1.0) dim_ok = true;
      if (a.keyword == "keepdim" && a.flag && *a.flag) keep_ok = true;
    }
    if (!dim_ok || !keep_ok) throw Error(ErrorCode::SyntaxError, form, fn.position);
    return make_unary(Op::Norm, args[0].expr);
  }

  std::span<const Token> toks_;
  std::size_t pos_ = 0;
};

// ───────────────────────────── serialization ─────────────────────────────

int precedence(const Node& n) {
  switch (n.op) {
    case Op::Add:
    case Op::Sub: return 1;
    case Op::Mul:
    case Op::Div: return 2;
    case Op::Neg: return 3;
    default: return 5;
  }
}

void write(const Node& n, std::string& out);

void write_wrapped(const Node& n, bool wrap, std::string& out) {
  if (wrap) out += '(';
  write(n, out);
  if (wrap) out += ')';
}

void write_call(std::string_view fn, const Node& n, std::string& out) {
  out += fn;
  out += '(';
  for (std::size_t i = 0; i < n.args.size(); ++i) {
    if (i) out += ", ";
    write(*n.args[i], out);
  }
  out += ')';
}

void write(const Node& n, std::string& out) {
  switch (n.op) {
    case Op::Const: {
      const std::string s = format_double(n.value);
      if (std::signbit(n.value)) {
        out += '(' + s + ')';
      } else {
        out += s;
      }
      return;
    }
    case Op::Var: out += variable_name(n.var); return;
    case Op::Slice:
      out += variable_name(n.var);
      out += "[..., " + std::to_string(n.channel) + ":" + std::to_string(n.channel + 1) + "]";
      return;
    case Op::Neg: {
      const Node& a = *n.args[0];
      out += '-';
      write_wrapped(a, precedence(a) <= precedence(n), out);
      return;
    }
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: {
      const char* sym = n.op == Op::Add ? " + " : n.op == Op::Sub ? " - " : n.op == Op::Mul ? " * " : " / ";
      write_wrapped(*n.args[0], precedence(*n.args[0]) < precedence(n), out);
      out += sym;
      write_wrapped(*n.args[1], precedence(*n.args[1]) <= precedence(n), out);
      return;
    }
    case Op::Abs: write_call("torch.abs", n, out); return;
    case Op::Sin: write_call("torch.sin", n, out); return;
    case Op::Cos: write_call("torch.cos", n, out); return;
    case Op::Tan: write_call("torch.tan", n, out); return;
    case Op::Exp: write_call("torch.exp", n, out); return;
    case Op::Log: write_call("torch.log", n, out); return;
    case Op::Sqrt: write_call("torch.sqrt", n, out); return;
    case Op::Tanh: write_call("torch.tanh", n, out); return;
    case Op::Sigmoid: write_call("torch.sigmoid", n, out); return;
    case Op::Relu: write_call("F.relu", n, out); return;
    case Op::Softplus: write_call("F.softplus", n, out); return;
    case Op::Pow: write_call("torch.pow", n, out); return;
    case Op::Min: write_call("torch.minimum", n, out); return;
    case Op::Max: write_call("torch.maximum", n, out); return;
    case Op::Norm:
      out += "torch.norm(";
      write(*n.args[0], out);
      out += ", dim=-1, keepdim=True)";
      return;
    case Op::ClampMin:
      out += "torch.clamp(";
      write(*n.args[0], out);
      out += ", min=";
      write(*n.args[1], out);
      out += ')';
      return;
  }
}

void collect_vars(const Node& n, std::set<Variable>& vars) {
  if (n.op == Op::Var || n.op == Op::Slice) vars.insert(n.var);
  for (const auto& a : n.args) collect_vars(*a, vars);
}

bool scalar_valued(const Node& n) {
  switch (n.op) {
    case Op::Const:
    case Op::Slice:
    case Op::Norm: return true;
    case Op::Var: return n.var == Variable::Deg;
    default:
      return std::all_of(n.args.begin(), n.args.end(), [](const NodePtr& a) { return scalar_valued(*a); });
  }
}

void check_scope(const Node& n, VarScope scope, std::size_t channels) {
  if (n.op == Op::Var || n.op == Op::Slice) {
    if (!in_scope(n.var, scope)) {
      throw Error(ErrorCode::ScopeViolation,
                  std::string(variable_name(n.var)) + " is not available in the " +
                      (scope == VarScope::Message ? "message" : "update") + " stream");
    }
    if (n.op == Op::Slice && n.var != Variable::Deg && static_cast<std::size_t>(n.channel) >= channels) {
      throw Error(ErrorCode::ChannelOutOfRange,
                  "channel " + std::to_string(n.channel) + " with D=" + std::to_string(channels));
    }
    if (n.op == Op::Slice && n.var == Variable::Deg && n.channel != 0) {
      throw Error(ErrorCode::ChannelOutOfRange, "deg has a single channel");
    }
  }
  for (const auto& a : n.args) check_scope(*a, scope, channels);
}

}  // namespace

Expr Expr::parse(std::string_view source) {
  const auto tokens = tokenize(source);
  return parse(std::span<const Token>(tokens));
}

Expr Expr::parse(std::span<const Token> tokens) {
  Parser p(tokens);
  return Expr(p.parse_all());
}

std::string Expr::to_string() const {
  std::string out;
  if (root_) write(*root_, out);
  return out;
}

std::vector<Variable> Expr::variables() const {
  std::set<Variable> vars;
  if (root_) collect_vars(*root_, vars);
  return {vars.begin(), vars.end()};
}

std::size_t Expr::output_width(std::size_t channels) const {
  return scalar_valued(*root_) ? 1 : channels;
}

bool operator==(const Expr& a, const Expr& b) {
  if (!a.root_ || !b.root_) return a.root_ == b.root_;
  return same_tree(*a.root_, *b.root_);
}

void validate_scope(const Expr& e, VarScope scope, std::size_t channels) {
  if (channels == 0) throw Error(ErrorCode::ShapeMismatch, "channel count must be positive");
  check_scope(e.root(), scope, channels);
}

// ───────────────────────────── evaluation ─────────────────────────────

namespace {

struct Column {
  std::size_t width = 1;
  std::vector<double> v;  // sites x width
  std::vector<double> t;  // sites x width x tangents
};

inline double sigmoid(double a) {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

inline double saturate(double v) {
  if (std::isnan(v)) return 0.0;
  return std::clamp(v, -kSaturation, kSaturation);
}

class Evaluator {
public:
  Evaluator(const SiteBatch& batch, std::span<const Variable> wrt) : b_(batch) {
    offsets_.fill(kNone);
    for (Variable v : wrt) {
      if (offsets_[var_index(v)] != kNone) continue;
      offsets_[var_index(v)] = tangents_;
      tangents_ += width_of(v);
    }
  }

  std::size_t tangents() const { return tangents_; }

  Column run(const Node& n) {
    Column c = eval(n);
    return c;
  }

private:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  std::size_t width_of(Variable v) const { return v == Variable::Deg ? 1 : b_.channels; }

  void finish(Column& c) const {
    const std::size_t P = tangents_;
    for (std::size_t k = 0; k < c.v.size(); ++k) {
      const double raw = c.v[k];
      if (!std::isfinite(raw) || std::fabs(raw) > kSaturation) {
        c.v[k] = saturate(raw);
        if (P) std::fill_n(c.t.begin() + static_cast<std::ptrdiff_t>(k * P), P, 0.0);
      } else if (P) {
        for (std::size_t p = 0; p < P; ++p) c.t[k * P + p] = saturate(c.t[k * P + p]);
      }
    }
  }

  Column eval(const Node& n) {
    const std::size_t S = b_.sites;
    const std::size_t P = tangents_;
    switch (n.op) {
      case Op::Const: {
        Column c;
        c.width = 1;
        c.v.assign(S, n.value);
        c.t.assign(S * P, 0.0);
        return c;
      }
      case Op::Var: {
        const std::size_t w = width_of(n.var);
        const auto data = b_.vars[var_index(n.var)];
        Column c;
        c.width = w;
        c.v.assign(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(S * w));
        c.t.assign(S * w * P, 0.0);
        if (const std::size_t off = offsets_[var_index(n.var)]; off != kNone) {
          for (std::size_t s = 0; s < S; ++s)
            for (std::size_t d = 0; d < w; ++d) c.t[(s * w + d) * P + off + d] = 1.0;
        }
        return c;
      }
      case Op::Slice: {
        const std::size_t w = width_of(n.var);
        const auto ch = static_cast<std::size_t>(n.channel);
        const auto data = b_.vars[var_index(n.var)];
        Column c;
        c.width = 1;
        c.v.resize(S);
        c.t.assign(S * P, 0.0);
        const std::size_t off = offsets_[var_index(n.var)];
        for (std::size_t s = 0; s < S; ++s) {
          c.v[s] = data[s * w + ch];
          if (off != kNone) c.t[s * P + off + ch] = 1.0;
        }
        return c;
      }
      case Op::Norm: {
        Column a = eval(*n.args[0]);
        Column c;
        c.width = 1;
        c.v.resize(S);
        c.t.assign(S * P, 0.0);
        for (std::size_t s = 0; s < S; ++s) {
          double sq = 0.0;
          for (std::size_t d = 0; d < a.width; ++d) sq += a.v[s * a.width + d] * a.v[s * a.width + d];
          const double norm = std::sqrt(sq);
          c.v[s] = norm;
          if (P && norm > 0.0) {
            for (std::size_t d = 0; d < a.width; ++d) {
              const double g = a.v[s * a.width + d] / norm;
              for (std::size_t p = 0; p < P; ++p) c.t[s * P + p] += g * a.t[(s * a.width + d) * P + p];
            }
          }
        }
        finish(c);
        return c;
      }
      case Op::Neg:
      case Op::Abs:
      case Op::Sin:
      case Op::Cos:
      case Op::Tan:
      case Op::Exp:
      case Op::Log:
      case Op::Sqrt:
      case Op::Tanh:
      case Op::Sigmoid:
      case Op::Relu:
      case Op::Softplus: return unary(n.op, eval(*n.args[0]));
      default: return binary(n, eval(*n.args[0]), eval(*n.args[1]));
    }
  }

  Column unary(Op op, Column a) {
    const std::size_t P = tangents_;
    for (std::size_t k = 0; k < a.v.size(); ++k) {
      const double x = a.v[k];
      double y = 0.0;
      double dy = 0.0;
      switch (op) {
        case Op::Neg: y = -x; dy = -1.0; break;
        case Op::Abs: y = std::fabs(x); dy = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); break;
        case Op::Sin: y = std::sin(x); dy = std::cos(x); break;
        case Op::Cos: y = std::cos(x); dy = -std::sin(x); break;
        case Op::Tan: y = std::tan(x); dy = 1.0 + y * y; break;
        case Op::Exp: y = std::exp(x); dy = y; break;
        case Op::Log:
          if (x > kEpsilon) {
            y = std::log(x);
            dy = 1.0 / x;
          } else {
            y = std::log(kEpsilon);
          }
          break;
        case Op::Sqrt:
          if (x > 0.0) {
            y = std::sqrt(x);
            dy = 0.5 / y;
          }
          break;
        case Op::Tanh: y = std::tanh(x); dy = 1.0 - y * y; break;
        case Op::Sigmoid: y = sigmoid(x); dy = y * (1.0 - y); break;
        case Op::Relu: y = x > 0.0 ? x : 0.0; dy = x > 0.0 ? 1.0 : 0.0; break;
        case Op::Softplus:
          y = std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
          dy = sigmoid(x);
          break;
        default: break;
      }
      a.v[k] = y;
      for (std::size_t p = 0; p < P; ++p) a.t[k * P + p] *= dy;
    }
    finish(a);
    return a;
  }

  Column binary(const Node& n, const Column& a, const Column& b) {
    const std::size_t S = b_.sites;
    const std::size_t P = tangents_;
    Column c;
    c.width = std::max(a.width, b.width);
    c.v.resize(S * c.width);
    c.t.assign(S * c.width * P, 0.0);
    const bool int_pow = n.op == Op::Pow && is_integer_const(*n.args[1]);
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t d = 0; d < c.width; ++d) {
        const std::size_t ia = s * a.width + (a.width == 1 ? 0 : d);
        const std::size_t ib = s * b.width + (b.width == 1 ? 0 : d);
        const double x = a.v[ia];
        const double y = b.v[ib];
        double r = 0.0;
        double dx = 0.0;
        double dz = 0.0;
        switch (n.op) {
          case Op::Add: r = x + y; dx = 1.0; dz = 1.0; break;
          case Op::Sub: r = x - y; dx = 1.0; dz = -1.0; break;
          case Op::Mul: r = x * y; dx = y; dz = x; break;
          case Op::Div: {
            double den = n.guarded ? y + kEpsilon : y;
            if (den == 0.0) den = kEpsilon;
            r = x / den;
            dx = 1.0 / den;
            dz = -r / den;
            break;
          }
          case Op::Pow:
            if (int_pow) {
              r = std::pow(x, y);
              dx = y == 0.0 ? 0.0 : y * std::pow(x, y - 1.0);
            } else if (x > 0.0) {
              r = std::pow(x, y);
              dx = y * std::pow(x, y - 1.0);
              dz = r * std::log(x);
            } else {
              r = y > 0.0 ? 0.0 : (y == 0.0 ? 1.0 : kSaturation);
            }
            break;
          case Op::Min:
            if (x <= y) { r = x; dx = 1.0; } else { r = y; dz = 1.0; }
            break;
          case Op::Max:
            if (x >= y) { r = x; dx = 1.0; } else { r = y; dz = 1.0; }
            break;
          case Op::ClampMin:
            if (x > y) { r = x; dx = 1.0; } else { r = y; dz = 1.0; }
            break;
          default: break;
        }
        const std::size_t k = s * c.width + d;
        c.v[k] = r;
        if (P) {
          dx = saturate(dx);
          dz = saturate(dz);
          for (std::size_t p = 0; p < P; ++p) {
            double g = 0.0;
            if (dx != 0.0) g += dx * a.t[ia * P + p];
            if (dz != 0.0) g += dz * b.t[ib * P + p];
            c.t[k * P + p] = g;
          }
        }
      }
    }
    finish(c);
    return c;
  }

  const SiteBatch& b_;
  std::array<std::size_t, kVariableCount> offsets_{};
  std::size_t tangents_ = 0;
};

SiteBatch batch_from_env(const Expr& e, const EvalEnv& env) {
  SiteBatch b;
  b.sites = 1;
  b.channels = env.channels;
  for (Variable v : e.variables()) {
    const auto& data = env[v];
    const std::size_t want = v == Variable::Deg ? 1 : env.channels;
    if (data.size() != want) {
      throw Error(ErrorCode::ShapeMismatch, std::string(variable_name(v)) + " has width " +
                                                std::to_string(data.size()) + ", expected " +
                                                std::to_string(want));
    }
    b.bind(v, data);
  }
  return b;
}

}  // namespace

EvalEnv EvalEnv::message(std::vector<double> xi, std::vector<double> xj) {
  if (xi.size() != xj.size() || xi.empty()) throw Error(ErrorCode::ShapeMismatch, "xi/xj width");
  EvalEnv env;
  env.channels = xi.size();
  std::vector<double> diff(xi.size());
  for (std::size_t d = 0; d < xi.size(); ++d) diff[d] = xj[d] - xi[d];
  env.values[var_index(Variable::Xi)] = std::move(xi);
  env.values[var_index(Variable::Xj)] = std::move(xj);
  env.values[var_index(Variable::Diff)] = std::move(diff);
  return env;
}

EvalEnv EvalEnv::update(std::vector<double> x, std::vector<double> h, double deg) {
  if (x.size() != h.size() || x.empty()) throw Error(ErrorCode::ShapeMismatch, "x/h width");
  if (!(deg >= 0.0)) throw Error(ErrorCode::NonFiniteInput, "deg must be >= 0");
  EvalEnv env;
  env.channels = x.size();
  env.values[var_index(Variable::X)] = std::move(x);
  env.values[var_index(Variable::H)] = std::move(h);
  env.values[var_index(Variable::Deg)] = {deg};
  return env;
}

BatchResult eval_batch(const Expr& e, const SiteBatch& batch, std::span<const Variable> wrt) {
  for (Variable v : e.variables()) {
    const auto data = batch.vars[var_index(v)];
    const std::size_t want = batch.sites * (v == Variable::Deg ? 1 : batch.channels);
    if (data.size() < want) {
      throw Error(ErrorCode::ShapeMismatch, std::string(variable_name(v)) + " is not bound for every site");
    }
    for (std::size_t k = 0; k < want; ++k) {
      if (!std::isfinite(data[k])) {
        throw Error(ErrorCode::NonFiniteInput, std::string(variable_name(v)) + " is not finite");
      }
    }
  }
  Evaluator ev(batch, wrt);
  Column c = ev.run(e.root());
  BatchResult r;
  r.width = c.width;
  r.tangents = ev.tangents();
  r.value = std::move(c.v);
  r.jacobian = std::move(c.t);
  return r;
}

std::vector<double> eval(const Expr& e, const EvalEnv& env) {
  return eval_batch(e, batch_from_env(e, env)).value;
}

Partials eval_with_partials(const Expr& e, const EvalEnv& env, std::span<const Variable> wrt) {
  SiteBatch b = batch_from_env(e, env);
  BatchResult r = eval_batch(e, b, wrt);
  Partials out;
  out.value = r.value;
  std::size_t offset = 0;
  std::set<Variable> seen;
  for (Variable v : wrt) {
    if (!seen.insert(v).second) continue;
    const std::size_t vw = v == Variable::Deg ? 1 : env.channels;
    std::vector<double> jac(r.width * vw);
    for (std::size_t o = 0; o < r.width; ++o)
      for (std::size_t c = 0; c < vw; ++c) jac[o * vw + c] = r.jacobian[o * r.tangents + offset + c];
    out.jacobian.emplace(v, std::move(jac));
    offset += vw;
  }
  return out;
}

// ───────────────────────────── fingerprint ─────────────────────────────

namespace {

struct ProbeData {
  std::size_t channels = 0;
  std::array<std::vector<double>, kVariableCount> vars;
};

ProbeData make_probes(std::size_t channels) {
  ProbeData p;
  p.channels = channels;
  const std::size_t S = kProbeCount;
  for (auto v : {Variable::Xi, Variable::Xj, Variable::Diff, Variable::X, Variable::H}) {
    p.vars[var_index(v)].resize(S * channels);
  }
  p.vars[var_index(Variable::Deg)].resize(S);
  Rng rng(kProbeSeed);
  for (std::size_t s = 0; s < S; ++s) {
    for (auto v : {Variable::Xi, Variable::Xj, Variable::X, Variable::H}) {
      for (std::size_t d = 0; d < channels; ++d) p.vars[var_index(v)][s * channels + d] = uniform(rng, -2.0, 2.0);
    }
    p.vars[var_index(Variable::Deg)][s] = 1.0 + static_cast<double>(uniform_index(rng, 8));
    for (std::size_t d = 0; d < channels; ++d) {
      p.vars[var_index(Variable::Diff)][s * channels + d] =
          p.vars[var_index(Variable::Xj)][s * channels + d] - p.vars[var_index(Variable::Xi)][s * channels + d];
    }
  }
  return p;
}

}  // namespace

Fingerprint fingerprint(const Expr& e, std::size_t channels) {
  const ProbeData probes = make_probes(channels);
  SiteBatch b;
  b.sites = kProbeCount;
  b.channels = channels;
  for (std::size_t v = 0; v < kVariableCount; ++v) b.vars[v] = probes.vars[v];
  const BatchResult r = eval_batch(e, b);

  Fingerprint fp;
  fp.signature.resize(kProbeCount * channels);
  double sq = 0.0;
  double peak = 0.0;
  for (std::size_t s = 0; s < kProbeCount; ++s) {
    for (std::size_t d = 0; d < channels; ++d) {
      const double v = r.value[s * r.width + (r.width == 1 ? 0 : d)];
      fp.signature[s * channels + d] = v;
      sq += v * v;
      peak = std::max(peak, std::fabs(v));
    }
  }
  if (peak < 1e-12 || !std::isfinite(sq) || sq == 0.0) {
    fp.zero = true;
    std::fill(fp.signature.begin(), fp.signature.end(), 0.0);
    return fp;
  }
  // Scale by the peak first so the squared norm cannot overflow.
  for (double& v : fp.signature) v /= peak;
  double norm = 0.0;
  for (double v : fp.signature) norm += v * v;
  norm = std::sqrt(norm);
  double sign = 1.0;
  for (double v : fp.signature) {
    if (std::fabs(v / norm) > 1e-9) {
      sign = v > 0.0 ? 1.0 : -1.0;
      break;
    }
  }
  for (double& v : fp.signature) v = sign * v / norm;
  return fp;
}

bool equivalent(const Fingerprint& a, const Fingerprint& b, double tolerance) {
  if (a.zero || b.zero) return a.zero && b.zero;
  if (a.signature.size() != b.signature.size()) return false;
  for (std::size_t k = 0; k < a.signature.size(); ++k) {
    if (std::fabs(a.signature[k] - b.signature[k]) > tolerance) return false;
  }
  return true;
}

bool equivalent(const Expr& a, const Expr& b, std::size_t channels) {
  return equivalent(fingerprint(a, channels), fingerprint(b, channels));
}

}  // namespace cosine::expr
