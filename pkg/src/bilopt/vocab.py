"""Reserved token ids shared by the model, the task suite and the instructions."""

BLANK = 0
EOS = 1
INPUT = 2
OUTPUT = 3
YES = 4
NO = 5
DISTRACT = 6
N_RESERVED = 7

NAMES = {
    BLANK: "<blank>",
    EOS: "<eos>",
    INPUT: "Input:",
    OUTPUT: "Output:",
    YES: "yes",
    NO: "no",
    DISTRACT: "<note>",
}
