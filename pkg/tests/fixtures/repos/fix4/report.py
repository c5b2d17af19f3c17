from fmt import Formatter, Boxed, WIDTH
import fmt

HEADER = "Report"


def title(a):
    return a.fmt(HEADER)


def body(rows, boxed=False):
    a = Boxed() if boxed else Formatter(WIDTH // 2)
    out = [title(a), a.rule()]
    for row in rows:
        out.append(a.fmt(row))
    return out


def footer():
    return fmt.SEP * fmt.WIDTH
