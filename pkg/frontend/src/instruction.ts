/**
 * Client-side mirror of the server instruction grammar.
 *
 * Strings composed here must match the server's renderer byte for byte
 * (verified against golden vectors exported by the CLI), so the formatting
 * rules below intentionally mimic the server: scales carry at most two
 * fractional digits, printed with one digit when the second is zero.
 */

export type TaskKind = "local" | "bokeh";

export interface InstructionFields {
  task: TaskKind;
  caption: string;
  s1: number;
  s2: number;
}

const FORBIDDEN_IN_CAPTION = ["clear with", "bokeh blur with"];

export class InvalidInstruction extends Error {}

export function validateCaption(caption: string): string {
  const trimmed = caption.trim();
  if (!trimmed) {
    throw new InvalidInstruction("region caption is empty");
  }
  const low = trimmed.toLowerCase();
  for (const kw of FORBIDDEN_IN_CAPTION) {
    if (low.includes(kw)) {
      throw new InvalidInstruction(`caption contains template keyword "${kw}"`);
    }
  }
  const opens = (trimmed.match(/\{/g) ?? []).length;
  const closes = (trimmed.match(/\}/g) ?? []).length;
  if (opens !== closes) {
    throw new InvalidInstruction("caption has unbalanced braces");
  }
  return trimmed;
}

export function roundScale(value: number): number {
  if (!Number.isFinite(value) || value < 0) {
    throw new InvalidInstruction(`scale must be a finite non-negative number, got ${value}`);
  }
  return Math.round(value * 100) / 100;
}

export function formatScale(value: number): string {
  const s = roundScale(value);
  const oneDecimal = Math.round(s * 10) / 10;
  return oneDecimal === s ? s.toFixed(1) : s.toFixed(2);
}

export function composeInstruction(fields: InstructionFields): string {
  const caption = validateCaption(fields.caption);
  const s1 = formatScale(fields.s1);
  const s2 = formatScale(fields.s2);
  if (fields.task === "bokeh") {
    return `make ${caption} clear with ${s1}, and keep other parts bokeh blur with ${s2}`;
  }
  return `make ${caption} clear with ${s1}, and make other parts with ${s2}`;
}
