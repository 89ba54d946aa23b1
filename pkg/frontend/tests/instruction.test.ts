import { describe, expect, it } from "vitest";
import {
  composeInstruction,
  formatScale,
  InvalidInstruction,
  validateCaption,
} from "../src/instruction.js";
import vectors from "./golden_vectors.json";

describe("golden vectors from the server CLI", () => {
  it("has the full 25-vector set", () => {
    expect(vectors).toHaveLength(25);
  });

  for (const v of vectors as Array<{
    task: "local" | "bokeh";
    caption: string;
    s1: number;
    s2: number;
    rendered: string;
  }>) {
    it(`byte-matches: ${v.rendered}`, () => {
      expect(
        composeInstruction({ task: v.task, caption: v.caption, s1: v.s1, s2: v.s2 }),
      ).toBe(v.rendered);
    });
  }
});

describe("scale formatting", () => {
  it("prints one decimal when the second is zero", () => {
    expect(formatScale(1)).toBe("1.0");
    expect(formatScale(0.8)).toBe("0.8");
    expect(formatScale(0.5)).toBe("0.5");
    expect(formatScale(2)).toBe("2.0");
  });
  it("keeps two significant decimals", () => {
    expect(formatScale(1.25)).toBe("1.25");
    expect(formatScale(0.05)).toBe("0.05");
  });
});

describe("caption validation", () => {
  it("rejects empties and template keywords", () => {
    expect(() => validateCaption("   ")).toThrow(InvalidInstruction);
    expect(() => validateCaption("thing clear with stuff")).toThrow(InvalidInstruction);
    expect(() => validateCaption("odd { brace")).toThrow(InvalidInstruction);
  });
  it("trims surrounding whitespace", () => {
    expect(validateCaption("  the dog  ")).toBe("the dog");
  });
});

describe("templates", () => {
  it("local template", () => {
    expect(composeInstruction({ task: "local", caption: "sign", s1: 0.9, s2: 1 })).toBe(
      "make sign clear with 0.9, and make other parts with 1.0",
    );
  });
  it("bokeh template", () => {
    expect(composeInstruction({ task: "bokeh", caption: "flower", s1: 1, s2: 2 })).toBe(
      "make flower clear with 1.0, and keep other parts bokeh blur with 2.0",
    );
  });
});
