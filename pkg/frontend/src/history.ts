/** Run history kept in browser storage; the server stays stateless. */

import type { PromptPair } from "./api.js";
import type { InstructionFields } from "./instruction.js";

export interface SessionRun {
  id: string;
  createdAt: string;
  request: InstructionFields & { seed: number; steps: number; instruction: string };
  response: {
    image: string;
    mask: string;
    prompts: PromptPair;
    timingsMs: number;
  };
  checksums: { image: string; mask: string };
}

/** FNV-1a, enough to show payload integrity next to each run. */
export function checksum(payload: string): string {
  let hash = 0x811c9dc5;
  for (let i = 0; i < payload.length; i++) {
    hash ^= payload.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193);
  }
  return (hash >>> 0).toString(16).padStart(8, "0");
}

export class RunHistory {
  constructor(
    private storage: Storage,
    private key: string = "region-restore-history",
    private limit: number = 50,
  ) {}

  list(): SessionRun[] {
    const raw = this.storage.getItem(this.key);
    if (!raw) return [];
    try {
      return JSON.parse(raw) as SessionRun[];
    } catch {
      return [];
    }
  }

  add(run: SessionRun): SessionRun[] {
    const runs = [run, ...this.list()].slice(0, this.limit);
    this.storage.setItem(this.key, JSON.stringify(runs));
    return runs;
  }

  clear(): void {
    this.storage.removeItem(this.key);
  }
}
