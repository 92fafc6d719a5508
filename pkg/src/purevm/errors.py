"""Exception hierarchy shared by the toolchain and the simulator."""


class PureVMError(Exception):
    """Base class; ``exit_code`` is what the CLI returns when it escapes."""

    exit_code = 1


# --- front end ---------------------------------------------------------------

class SourceSyntaxError(PureVMError):
    def __init__(self, message, line, col, expected=(), source_name="<input>"):
        self.line = line
        self.col = col
        self.expected = frozenset(expected)
        self.source_name = source_name
        exp = ""
        if self.expected:
            exp = " (expected one of: %s)" % ", ".join(sorted(self.expected))
        super().__init__("%s:%d:%d: %s%s" % (source_name, line, col, message, exp))

    @property
    def position(self):
        return (self.line, self.col)


class DuplicateName(PureVMError):
    def __init__(self, name, line=0, col=0, source_name="<input>"):
        self.name = name
        self.line = line
        self.col = col
        super().__init__("%s:%d:%d: duplicate declaration of %r" % (source_name, line, col, name))

    @property
    def position(self):
        return (self.line, self.col)


class ConfigError(PureVMError):
    exit_code = 2

    def __init__(self, key, reason, line=0):
        self.key = key
        self.reason = reason
        self.line = line
        where = " (line %d)" % line if line else ""
        super().__init__("config key %r: %s%s" % (key, reason, where))


# --- type checking -----------------------------------------------------------

class TypeCheckError(PureVMError):
    """Carries an optional source position (line, col)."""

    def __init__(self, message, span=None):
        self.span = span
        self.message = message
        if span is not None:
            message = "%s:%d:%d: %s" % (span.source, span.line, span.col, message)
        super().__init__(message)

    @property
    def position(self):
        return None if self.span is None else (self.span.line, self.span.col)


class TypeMismatch(TypeCheckError):
    def __init__(self, a, b, span=None, message=None):
        self.a = a
        self.b = b
        super().__init__(message or "type mismatch: %s vs %s" % (a, b), span)


class OccursCheck(TypeCheckError):
    def __init__(self, var, term, span=None):
        self.var = var
        self.term = term
        super().__init__("infinite type: %s occurs in %s" % (var, term), span)


class UnboundName(TypeCheckError):
    def __init__(self, name, span=None):
        self.name = name
        super().__init__("unbound name %r" % name, span)


class NonGroundHandler(TypeCheckError):
    def __init__(self, name, ty, span=None):
        self.name = name
        super().__init__("handler %r has non-ground type %s" % (name, ty), span)


# --- lowering ----------------------------------------------------------------

class LoweringError(PureVMError):
    pass


class LayoutOverflow(LoweringError):
    def __init__(self, needed, available):
        self.needed = needed
        self.available = available
        super().__init__("layout needs %d bytes but nvm_size is %d" % (needed, available))


class UnknownPrimitive(LoweringError):
    def __init__(self, name):
        self.name = name
        super().__init__("primitive %r has no built-in semantics" % name)


class NonTailRecursion(LoweringError):
    pass


class InvalidProgram(LoweringError):
    """Raised by the IR validator (dangling ids, bad arity, ...)."""


# --- memory / vm -------------------------------------------------------------

class PowerFailure(Exception):
    """Simulated loss of power; volatile state is gone once this propagates."""


class OutOfRange(PureVMError):
    def __init__(self, addr):
        self.addr = addr
        super().__init__("address %d out of range" % addr)


class LogFull(PureVMError):
    def __init__(self, capacity):
        self.capacity = capacity
        super().__init__("undo log full (%d entries); UNDO region mis-sized" % capacity)


class CorruptState(PureVMError):
    pass


class AlreadyBooted(PureVMError):
    pass


class NonTermination(PureVMError):
    def __init__(self, budget):
        self.budget = budget
        super().__init__("micro-step budget of %d exceeded" % budget)


class Trap(PureVMError):
    def __init__(self, message, block=None):
        self.block = block
        super().__init__("%s (block %s)" % (message, block))


class TrapDivideByZero(Trap):
    def __init__(self, block=None):
        super().__init__("division by zero", block)


class TrapIndexOutOfBounds(Trap):
    def __init__(self, slot, index, block=None):
        self.slot = slot
        self.index = index
        super().__init__("index %d out of bounds for %s" % (index, slot), block)


class TrapStackOverflow(Trap):
    def __init__(self, block=None):
        super().__init__("continuation stack overflow", block)


class DynamicTypeError(Trap):
    pass


class CostUnknown(PureVMError):
    def __init__(self, kind):
        self.kind = kind
        super().__init__("no energy cost for op kind %r" % (kind,))


class OracleMismatch(PureVMError):
    def __init__(self, details):
        self.details = details
        super().__init__("oracle mismatch: %s" % (details,))
