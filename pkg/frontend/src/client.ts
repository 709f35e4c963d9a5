/**
 * Session socket client: one socket per tab, message handling serialized on
 * the event queue.  Actions attempted while disconnected are queued and
 * surfaced as a warning; the queue flushes on reconnect.
 */

import { OperatorAction, ParseResult, encodeAction, parseLine } from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
}

export interface ClientEvents {
  onParsed(result: ParseResult): void;
  onConnectionChange(connected: boolean): void;
  /** Called when an action had to be queued while disconnected. */
  onQueuedWarning(queued: number): void;
}

export class SessionClient {
  private socket: SocketLike | null = null;
  private queue: string[] = [];
  connected = false;

  constructor(private events: ClientEvents) {}

  attach(socket: SocketLike): void {
    this.socket = socket;
    this.connected = true;
    this.events.onConnectionChange(true);
    for (const line of this.queue.splice(0)) socket.send(line);
  }

  detach(): void {
    this.socket = null;
    this.connected = false;
    this.events.onConnectionChange(false);
  }

  /** Feed one raw frame of socket data (may contain several NDJSON lines). */
  receive(data: string): void {
    for (const line of data.split("\n")) {
      if (line.trim().length === 0) continue;
      this.events.onParsed(parseLine(line));
    }
  }

  sendAction(action: OperatorAction): boolean {
    const line = encodeAction(action);
    if (this.connected && this.socket) {
      this.socket.send(line);
      return true;
    }
    this.queue.push(line);
    this.events.onQueuedWarning(this.queue.length);
    return false;
  }

  startSession(sessionId: string, mode: "sim" | "push"): void {
    const line =
      JSON.stringify({ v: 1, type: "start", session_id: sessionId, mode }) +
      "\n";
    if (this.connected && this.socket) this.socket.send(line);
    else this.queue.push(line);
  }

  get queuedCount(): number {
    return this.queue.length;
  }
}
