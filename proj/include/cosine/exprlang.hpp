#pragma once

// Basis-function expression language.
//
// Sources use the tensor-framework surface syntax a language model would write
// ("torch.sin(xj - xi)", "F.relu(h)", "x[..., 0:1]"). Namespaces are stripped
// at tokenize time and calls are mapped onto a small closed function set.
//
// Numeric semantics, shared by eval, eval_with_partials and the batched
// evaluator:
//   * log clamps its input to >= 1e-6, sqrt to >= 0; clamped regions have a
//     zero derivative.
//   * A division adds kEpsilon to its denominator unless a static lower-bound
//     analysis proves the denominator is already >= kEpsilon
//     (e.g. "deg + 1e-6" or "1 + abs(x)").
//   * pow with a constant integer exponent is exact; any other exponent clamps
//     the base to >= 0.
//   * abs and relu have subgradient 0 at 0; norm has gradient 0 at the origin.
//   * Every intermediate value and derivative saturates at +/-kSaturation, so
//     finite inputs always produce finite outputs.

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cosine::expr {

inline constexpr double kEpsilon = 1e-6;
inline constexpr double kSaturation = 1e100;
inline constexpr std::size_t kMaxSourceLength = 500;

enum class Variable : std::uint8_t { Xi, Xj, Diff, X, H, Deg };
inline constexpr std::size_t kVariableCount = 6;

enum class VarScope { Message, Update };

std::string_view variable_name(Variable v);
bool in_scope(Variable v, VarScope scope);

enum class Op : std::uint8_t {
  Const,
  Var,
  Slice,
  Neg,
  Abs,
  Sin,
  Cos,
  Tan,
  Exp,
  Log,
  Sqrt,
  Tanh,
  Sigmoid,
  Relu,
  Softplus,
  Norm,
  Add,
  Sub,
  Mul,
  Div,
  Pow,
  Min,
  Max,
  ClampMin,
};

struct Node;
using NodePtr = std::shared_ptr<const Node>;

struct Node {
  Op op = Op::Const;
  double value = 0.0;          // Const
  Variable var = Variable::X;  // Var, Slice
  int channel = 0;             // Slice
  bool guarded = false;        // Div: kEpsilon is added to the denominator
  std::vector<NodePtr> args;
};

enum class TokenKind {
  Identifier,
  Number,
  Operator,  // + - * / **
  LParen,
  RParen,
  LBracket,
  RBracket,
  Comma,
  Colon,
  Ellipsis,
  Assign,
  End,
};

struct Token {
  TokenKind kind = TokenKind::End;
  std::string text;       // identifiers: bare name with namespace stripped
  std::string qualified;  // identifiers: name as written, e.g. "torch.sin"
  double number = 0.0;
  std::size_t position = 0;
};

// Throws Error{UnknownCharacter, SourceTooLong, ForbiddenConstruct}.
std::vector<Token> tokenize(std::string_view source);

// Immutable parsed expression. Cheap to copy; safe to share across threads.
class Expr {
public:
  Expr() = default;
  explicit Expr(NodePtr root) : root_(std::move(root)) {}

  static Expr parse(std::string_view source);
  static Expr parse(std::span<const Token> tokens);

  const Node& root() const { return *root_; }
  const NodePtr& root_ptr() const { return root_; }
  bool empty() const { return !root_; }

  // Canonical surface syntax. Byte-stable for a given tree and parses back to
  // an equal tree.
  std::string to_string() const;

  // Variables referenced anywhere in the tree, in enum order.
  std::vector<Variable> variables() const;
  // 1 for scalar-valued trees, `channels` otherwise.
  std::size_t output_width(std::size_t channels) const;

  friend bool operator==(const Expr& a, const Expr& b);

private:
  NodePtr root_;
};

// Throws ScopeViolation(variable) or ChannelOutOfRange(c, D).
void validate_scope(const Expr& e, VarScope scope, std::size_t channels);

// Numeric binding of the scoped variables at one site.
struct EvalEnv {
  std::size_t channels = 1;
  std::array<std::vector<double>, kVariableCount> values;  // deg has width 1

  static EvalEnv message(std::vector<double> xi, std::vector<double> xj);
  static EvalEnv update(std::vector<double> x, std::vector<double> h, double deg);

  const std::vector<double>& operator[](Variable v) const {
    return values[static_cast<std::size_t>(v)];
  }
};

std::vector<double> eval(const Expr& e, const EvalEnv& env);

struct Partials {
  std::vector<double> value;
  // Row-major (output width) x (variable width) Jacobian per variable.
  std::map<Variable, std::vector<double>> jacobian;
};

Partials eval_with_partials(const Expr& e, const EvalEnv& env, std::span<const Variable> wrt);

// Column-major binding of many sites at once; each span holds
// sites * channels values (sites values for deg).
struct SiteBatch {
  std::size_t sites = 0;
  std::size_t channels = 1;
  std::array<std::span<const double>, kVariableCount> vars{};

  void bind(Variable v, std::span<const double> data) {
    vars[static_cast<std::size_t>(v)] = data;
  }
};

struct BatchResult {
  std::size_t width = 1;
  // Total seeded input channels: sum of widths of the wrt variables.
  std::size_t tangents = 0;
  std::vector<double> value;     // sites x width
  std::vector<double> jacobian;  // sites x width x tangents
};

// Evaluates `e` at every site. When `wrt` is non-empty the Jacobian against
// those variables is propagated in forward mode; tangent columns follow the
// order of `wrt`, each variable contributing its width.
BatchResult eval_batch(const Expr& e, const SiteBatch& batch, std::span<const Variable> wrt = {});

// Normalized evaluation signature over the fixed probe set, used to decide
// equivalence up to sign and constant scale.
//
// Probe set: 64 sites, seed 0xC051; xi, xj, x, h channels i.i.d. uniform on
// [-2, 2], diff = xj - xi, deg uniform integer in [1, 8]. Outputs are
// broadcast to `channels` width, concatenated, scaled to unit length and
// sign-fixed so the first nonzero entry is positive.
struct Fingerprint {
  std::vector<double> signature;
  bool zero = false;
};

inline constexpr std::uint64_t kProbeSeed = 0xC051;
inline constexpr std::size_t kProbeCount = 64;

Fingerprint fingerprint(const Expr& e, std::size_t channels);
bool equivalent(const Fingerprint& a, const Fingerprint& b, double tolerance = 1e-6);
bool equivalent(const Expr& a, const Expr& b, std::size_t channels);

}  // namespace cosine::expr
